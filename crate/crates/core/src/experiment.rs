//! End-to-end runs: data, training, retrieval evaluation and a linear view
//! probe on the learned feature maps.

use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skyalign_nn::global_avg_pool;

use crate::config::{Config, DataSource};
use crate::dataset::{
    batch_tensor, generate_toy_dataset, load_university1652, Dataset, Direction, ImageSample, LoadOptions, LoadReport,
    Split, View,
};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::probe::LinearProbe;
use crate::retrieval::{evaluate, Evaluation, MetricsReport, Protocol};
use crate::training::{train, TrainOptions, TrainOutcome};

const FEATURE_BATCH: usize = 32;

fn root(config: &Config) -> Result<&Path> {
    config
        .data
        .root
        .as_deref()
        .ok_or_else(|| Error::Config("data.root must be set for university1652 data".into()))
}

fn load_options(config: &Config, direction: Direction) -> LoadOptions {
    LoadOptions { image_size: config.data.image_size, direction, eager: config.data.eager }
}

/// Training split plus, for on-disk data, its load report.
pub fn load_train(config: &Config) -> Result<(Dataset, Option<LoadReport>)> {
    match config.data.source {
        DataSource::Toy => Ok((generate_toy_dataset(&config.toy_config())?.train, None)),
        DataSource::University1652 => {
            let (d, r) = load_university1652(root(config)?, Split::Train, &load_options(config, Direction::UavToSatellite))?;
            Ok((d, Some(r)))
        }
    }
}

/// `(query, gallery)` for a protocol.
pub fn load_eval(config: &Config, protocol: Protocol) -> Result<(Dataset, Dataset)> {
    let direction = match protocol {
        Protocol::UavToSatSingle | Protocol::UavToSatMulti => Direction::UavToSatellite,
        Protocol::SatToUav => Direction::SatelliteToUav,
    };
    match config.data.source {
        DataSource::Toy => {
            let toy = generate_toy_dataset(&config.toy_config())?;
            Ok(match direction {
                Direction::UavToSatellite => (toy.query, toy.gallery),
                // the satellite gallery becomes the query set and vice versa
                Direction::SatelliteToUav => (
                    Dataset { split: Split::Query, ..toy.gallery },
                    Dataset { split: Split::Gallery, ..toy.query },
                ),
            })
        }
        DataSource::University1652 => {
            let opts = load_options(config, direction);
            let (q, _) = load_university1652(root(config)?, Split::Query, &opts)?;
            let (g, _) = load_university1652(root(config)?, Split::Gallery, &opts)?;
            Ok((q, g))
        }
    }
}

/// Spatially averaged backbone maps, one `C`-dim row per sample.
pub fn pooled_features(encoder: &Encoder, samples: &[&ImageSample]) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(FEATURE_BATCH) {
        let x = batch_tensor::<ChaCha8Rng>(chunk, None)?;
        let g = global_avg_pool(&encoder.backbone_infer(&x)?);
        rows.extend(g.outer_iter().map(|r| r.to_owned()));
    }
    let c = encoder.feature_channels();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Array2::from_shape_vec((rows.len(), c), flat).expect("one row per sample"))
}

/// Balanced accuracy of a logistic view probe fitted on frozen features of
/// `fit` and scored on `score`.
pub fn view_probe_accuracy(encoder: &Encoder, fit: &[&ImageSample], score: &[&ImageSample]) -> Result<f64> {
    let labels = |s: &[&ImageSample]| s.iter().map(|x| x.view == View::Uav).collect::<Vec<bool>>();
    for (set, role) in [(fit, "fit"), (score, "score")] {
        let l = labels(set);
        if !l.contains(&true) || !l.contains(&false) {
            return Err(Error::Data(format!("view probe {role} set needs both views")));
        }
    }
    let probe = LinearProbe::fit(&pooled_features(encoder, fit)?, &labels(fit));
    Ok(probe.balanced_accuracy(&pooled_features(encoder, score)?, &labels(score)))
}

/// Metrics of one run, free of timing or paths so identical runs serialize
/// identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: usize,
    pub steps: u64,
    pub metrics: Vec<MetricsReport>,
    pub view_probe_accuracy: Option<f64>,
    pub incidents: usize,
}

impl RunSummary {
    pub fn metrics_for(&self, protocol: Protocol) -> Option<&MetricsReport> {
        self.metrics.iter().find(|m| m.protocol == protocol)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub outcome: TrainOutcome,
    pub evaluations: Vec<Evaluation>,
}

/// Evaluate every configured protocol.
pub fn evaluate_all(extractor: &Encoder, config: &Config) -> Result<Vec<Evaluation>> {
    config.eval.protocols.iter().map(|&p| {
        let (q, g) = load_eval(config, p)?;
        evaluate(extractor, &q, &g, p)
    }).collect()
}

/// Probe on the training images, scored on the held-out query and gallery
/// images of the UAV-to-satellite direction.
pub fn probe_for(encoder: &Encoder, config: &Config, train_data: &Dataset) -> Result<f64> {
    let (q, g) = load_eval(config, Protocol::UavToSatSingle)?;
    let fit: Vec<&ImageSample> = train_data.samples.iter().collect();
    let score: Vec<&ImageSample> = q.samples.iter().chain(&g.samples).collect();
    view_probe_accuracy(encoder, &fit, &score)
}

/// Train, then evaluate; the view probe runs when `with_probe` is set.
pub fn run(config: &Config, opts: &TrainOptions, with_probe: bool) -> Result<RunOutput> {
    let config = config.resolved();
    config.validate()?;
    let (train_data, _) = load_train(&config)?;
    let outcome = train(&config, &train_data, opts)?;
    let encoder = &outcome.state.model.encoder;
    let evaluations = evaluate_all(encoder, &config)?;
    let view_probe_accuracy = if with_probe { Some(probe_for(encoder, &config, &train_data)?) } else { None };
    let summary = RunSummary {
        variant: config.schedule.variant.to_string(),
        seed: config.seed,
        config_hash: config.hash(),
        epochs: outcome.state.epoch,
        steps: outcome.state.global_step,
        metrics: evaluations.iter().map(|e| e.report.clone()).collect(),
        view_probe_accuracy,
        incidents: outcome.state.incidents.len(),
    };
    Ok(RunOutput { summary, outcome, evaluations })
}

/// Median of a non-empty slice (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn toy_eval_sets_swap_roles_for_sat_queries() {
        let cfg = Config::toy();
        let (q, g) = load_eval(&cfg, Protocol::SatToUav).unwrap();
        assert!(q.samples.iter().all(|s| s.view == View::Satellite));
        assert!(g.samples.iter().all(|s| s.view == View::Uav));
        let (q, g) = load_eval(&cfg, Protocol::UavToSatMulti).unwrap();
        assert_eq!(q.count_view(View::Uav), q.len());
        assert_eq!(g.count_view(View::Satellite), g.len());
    }

    #[test]
    fn missing_root_is_a_config_error() {
        let cfg = Config::full(256);
        assert!(matches!(load_train(&cfg), Err(Error::Config(_))));
    }
}
