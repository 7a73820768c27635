// Per-joint and per-frame feature-response profiles of a trained model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Batch, Hgct};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Per joint, from the spatial stream.
    Spatial,
    /// Per frame, from the temporal stream.
    Temporal,
    /// Per joint, from the stage output.
    BlockOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub stage: usize,
    pub kind: FeatureKind,
    pub index: usize,
    pub response: f64,
}

/// Channel L2 norm at every `(b, t, v)` of a `[B, C, T, V]` map, averaged
/// over the axes not kept. `keep_time` selects a per-frame profile.
fn profile<F: Scalar>(f: &Tensor<F>, keep_time: bool) -> Vec<f64> {
    let s = f.shape();
    let (b, c, t, v) = (s[0], s[1], s[2], s[3]);
    let d = f.data();
    let mut out = vec![0.0; if keep_time { t } else { v }];
    for bi in 0..b {
        for ti in 0..t {
            for vi in 0..v {
                let sq: f64 = (0..c)
                    .map(|ci| d[((bi * c + ci) * t + ti) * v + vi].as_f64().powi(2))
                    .sum();
                out[if keep_time { ti } else { vi }] += sq.sqrt();
            }
        }
    }
    let n = (b * if keep_time { v } else { t }) as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// Divides by the maximum, so the largest response is exactly one.
fn normalise(mut xs: Vec<f64>) -> Vec<f64> {
    let max = xs.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        xs.iter_mut().for_each(|x| *x /= max);
    } else {
        log::warn!("all feature responses are zero; left unnormalised");
    }
    xs
}

/// Eval-mode response profiles of every stage.
pub fn feature_responses<F: Scalar>(model: &Hgct<F>, batch: &Batch<F>) -> Result<Vec<FeatureRecord>> {
    let mut s = model.session(Mode::Eval, usize::MAX);
    let x = s.input(batch.x.clone());
    let trace = model.forward_traced(&mut s, x)?;
    let mut records = Vec::new();
    for (stage, st) in trace.stages.iter().enumerate() {
        let parts = [
            (FeatureKind::Spatial, st.dstt.spatial, false),
            (FeatureKind::Temporal, st.dstt.temporal, true),
            (FeatureKind::BlockOutput, st.output, false),
        ];
        for (kind, var, keep_time) in parts {
            let values = normalise(profile(s.graph.value(var), keep_time));
            records.extend(values.into_iter().enumerate().map(|(index, response)| FeatureRecord {
                stage,
                kind,
                index,
                response,
            }));
        }
    }
    Ok(records)
}

/// Writes [`feature_responses`] as CSV with columns `stage, kind, index, response`.
pub fn dump_feature_responses<F: Scalar>(model: &Hgct<F>, batch: &Batch<F>, path: &Path) -> Result<Vec<FeatureRecord>> {
    let records = feature_responses(model, batch)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_pins_the_maximum() {
        let v = normalise(vec![0.3, 0.9, 0.1]);
        assert_eq!(v[1], 1.0);
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn profiles_average_channel_norms() {
        // B=1, C=2, T=1, V=2: joint 0 has (3, 4), joint 1 has (0, 1)
        let f = Tensor::<f64>::from_f64([1, 2, 1, 2], &[3.0, 0.0, 4.0, 1.0]).unwrap();
        assert_eq!(profile(&f, false), vec![5.0, 1.0]);
        assert_eq!(profile(&f, true), vec![3.0]);
    }
}
