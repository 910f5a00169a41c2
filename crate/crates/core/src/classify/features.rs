use std::path::Path;

use crate::data::Subset;
use crate::error::{AsrError, Result};
use crate::model::StructuredLatent;

/// Short names of the six primitive variables.
pub const VARIABLES: [&str; 6] = ["w", "h", "d", "ar", "ag", "ab"];

/// `s{scale}_{variable}_{mean|std}`, scale-major.
pub fn asr_feature_names(scales: usize) -> Vec<String> {
    (0..scales)
        .flat_map(|s| VARIABLES.iter().flat_map(move |v| ["mean", "std"].map(|stat| format!("s{s}_{v}_{stat}"))))
        .collect()
}

pub fn baseline_feature_names(latent_dim: usize) -> Vec<String> {
    (0..latent_dim).map(|k| format!("z{k:03}_mean")).collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

/// Pools every grid cell of every latent per (scale, variable) and emits
/// its mean and standard deviation.
pub fn asr_features(latents: &[StructuredLatent]) -> Result<Vec<f64>> {
    let first = latents.first().ok_or_else(|| AsrError::Contract("a bag needs at least one latent".into()))?;
    let shape: Vec<usize> = first.scales.iter().map(Vec::len).collect();
    let mut out = Vec::with_capacity(12 * shape.len());
    for (s, _) in shape.iter().enumerate() {
        for v in 0..6 {
            let mut pool = Vec::new();
            for l in latents {
                let cells = l
                    .scales
                    .get(s)
                    .filter(|c| c.len() == shape[s])
                    .ok_or_else(|| AsrError::Contract("latents of one bag differ in grid layout".into()))?;
                pool.extend(cells.iter().map(|p| p.to_array()[v]));
            }
            let (m, sd) = mean_std(&pool);
            out.push(m);
            out.push(sd);
        }
    }
    Ok(out)
}

/// Mean of each latent dimension over the bag.
pub fn baseline_features(latents: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = latents.first().map(Vec::len).ok_or_else(|| AsrError::Contract("a bag needs at least one latent".into()))?;
    if latents.iter().any(|l| l.len() != dim) {
        return Err(AsrError::Contract("latents of one bag differ in width".into()));
    }
    Ok((0..dim)
        .map(|k| latents.iter().map(|l| l[k]).sum::<f64>() / latents.len() as f64)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub bag_id: String,
    pub case_id: String,
    pub label: String,
    pub subset: Subset,
    pub values: Vec<f64>,
}

/// Bag feature table with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

const META: [&str; 4] = ["bag_id", "case_id", "label", "subset"];

impl FeatureTable {
    /// CSV with the metadata columns followed by the feature columns.
    /// Values are written with Rust's shortest round-trip formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(META.iter().copied().chain(self.names.iter().map(String::as_str)))?;
        for r in &self.rows {
            let subset = match r.subset {
                Subset::Train => "train",
                Subset::Val => "val",
                Subset::Test => "test",
            };
            let mut rec = vec![r.bag_id.clone(), r.case_id.clone(), r.label.clone(), subset.to_string()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| AsrError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < META.len() || header.iter().take(4).ne(META.iter().copied()) {
            return Err(AsrError::Config(format!("{} does not start with {META:?}", path.display())));
        }
        let names: Vec<String> = header.iter().skip(4).map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let subset = match &rec[3] {
                "train" => Subset::Train,
                "val" => Subset::Val,
                "test" => Subset::Test,
                other => return Err(AsrError::Config(format!("unknown subset `{other}`"))),
            };
            let values = rec
                .iter()
                .skip(4)
                .map(|v| v.parse::<f64>().map_err(|_| AsrError::Config(format!("bad feature value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(FeatureRow {
                bag_id: rec[0].to_string(),
                case_id: rec[1].to_string(),
                label: rec[2].to_string(),
                subset,
                values,
            });
        }
        Ok(Self { names, rows })
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.rows.iter().map(|r| r.label.clone()).collect();
        c.sort();
        c.dedup();
        c
    }
}
