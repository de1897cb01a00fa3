//! CSV + JSON sidecar persistence for [`Dataset`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, LatentProfile, OracleRecord, Sector, StructuralConfig, UnitRecord, STRUCTURED_DIM, STRUCTURED_NAMES};
use crate::error::{Error, Result};
use crate::textproxy::PcaModel;

pub const DATA_FILE: &str = "data.csv";
pub const SIDECAR_FILE: &str = "config.json";
pub const PCA_FILE: &str = "pca.json";

const ORACLE_COLUMNS: [&str; 5] =
    ["oracle_true_effect", "oracle_ability", "oracle_motivation", "oracle_propensity", "oracle_baseline"];

/// Everything in `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub config: StructuralConfig,
    pub seed: u64,
    pub n_units: usize,
    pub true_ate: f64,
    pub true_ate_by_sector: BTreeMap<Sector, f64>,
}

fn header(emb_dim: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "sector".to_string()];
    h.extend(STRUCTURED_NAMES.iter().map(|s| s.to_string()));
    h.extend((0..emb_dim).map(|j| format!("emb_{j:02}")));
    h.push("treatment".into());
    h.push("outcome".into());
    h.extend(ORACLE_COLUMNS.iter().map(|s| s.to_string()));
    h
}

/// Writes `data.csv`, `config.json` and (when present) `pca.json` into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let emb_dim = ds.units()[0].embedding_features.len();
    let mut w = csv::Writer::from_path(dir.join(DATA_FILE))?;
    w.write_record(header(emb_dim))?;
    let mut row: Vec<String> = Vec::with_capacity(emb_dim + STRUCTURED_DIM + 9);
    for u in ds.units() {
        row.clear();
        row.push(u.id.to_string());
        row.push(u.sector.name().to_string());
        row.extend(u.structured.iter().map(|v| v.to_string()));
        row.extend(u.embedding_features.iter().map(|v| v.to_string()));
        row.push(u.treatment.to_string());
        row.push(u.outcome.to_string());
        let o = &u.oracle;
        for v in [o.true_effect, o.latents.ability, o.latents.motivation, o.propensity, o.baseline] {
            row.push(v.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    let sidecar = DatasetSidecar {
        config: ds.config().clone(),
        seed: ds.seed(),
        n_units: ds.len(),
        true_ate: ds.true_ate,
        true_ate_by_sector: ds.true_ate_by_sector.clone(),
    };
    fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    if let Some(pca) = ds.pca() {
        fs::write(dir.join(PCA_FILE), serde_json::to_string(pca)? + "\n")?;
    }
    Ok(())
}

fn parse_f64(field: &str, col: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("row {line}: column {col}: not a number: {field:?}")))
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let sidecar: DatasetSidecar = serde_json::from_str(&fs::read_to_string(dir.join(SIDECAR_FILE))?)?;
    sidecar.config.validate()?;
    let pca = match fs::read_to_string(dir.join(PCA_FILE)) {
        Ok(text) => Some(serde_json::from_str::<PcaModel>(&text)?),
        Err(_) => None,
    };
    let mut r = csv::Reader::from_path(dir.join(DATA_FILE))?;
    let head: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let emb_dim = head.iter().filter(|h| h.starts_with("emb_")).count();
    if head != header(emb_dim) {
        return Err(Error::Data("unexpected column layout in data.csv".into()));
    }
    let mut units = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let get = |j: usize| parse_f64(&rec[j], &head[j], line + 1);
        let id: usize = rec[0].parse().map_err(|_| Error::Data(format!("row {}: bad id", line + 1)))?;
        let sector: Sector = rec[1].parse().map_err(|_| Error::Data(format!("row {}: bad sector {:?}", line + 1, &rec[1])))?;
        let mut structured = [0.0; STRUCTURED_DIM];
        for (k, s) in structured.iter_mut().enumerate() {
            *s = get(2 + k)?;
        }
        let e0 = 2 + STRUCTURED_DIM;
        let embedding_features = (e0..e0 + emb_dim).map(get).collect::<Result<Vec<_>>>()?;
        let t = e0 + emb_dim;
        let treatment = match rec[t].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::Data(format!("row {}: treatment must be 0 or 1, got {other:?}", line + 1))),
        };
        let outcome = get(t + 1)?;
        let oracle = OracleRecord {
            true_effect: get(t + 2)?,
            latents: LatentProfile { ability: get(t + 3)?, motivation: get(t + 4)? },
            propensity: get(t + 5)?,
            baseline: get(t + 6)?,
        };
        units.push(UnitRecord { id, sector, structured, embedding_features, treatment, outcome, oracle });
    }
    if units.len() != sidecar.n_units {
        return Err(Error::Data(format!("sidecar says {} units, csv has {}", sidecar.n_units, units.len())));
    }
    Dataset::from_units(units, sidecar.config, sidecar.seed, pca)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate;
    use crate::textproxy::EmbeddingConfig;

    #[test]
    fn round_trip_is_exact() {
        let cfg = StructuralConfig {
            embedding: EmbeddingConfig { raw_dim: 40, ..EmbeddingConfig::default() },
            ..StructuralConfig::default()
        };
        let ds = generate(&cfg, 120, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
        let h = fs::read_to_string(dir.path().join(DATA_FILE)).unwrap();
        let first = h.lines().next().unwrap();
        assert!(first.contains("emb_00") && first.contains("emb_64") && first.contains("oracle_ability"));
    }

    #[test]
    fn malformed_csv_is_a_data_error() {
        let cfg = StructuralConfig {
            embedding: EmbeddingConfig { raw_dim: 40, ..EmbeddingConfig::default() },
            ..StructuralConfig::default()
        };
        let ds = generate(&cfg, 60, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join(DATA_FILE);
        let text = fs::read_to_string(&path).unwrap().replacen(",1,", ",x,", 1);
        fs::write(&path, text).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
