use std::fmt::Write as _;

use super::{evaluate, prepare_training_set, train, AblationVariant, EvalConfig, TrainConfig, TrainEnv};
use crate::dataio::DatasetIndex;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Full-scale SSIM reported for three variants, kept for side-by-side
/// display only.
pub const REFERENCE_SSIM: [(AblationVariant, f64); 3] = [
    (AblationVariant::PixelL1, 0.162),
    (AblationVariant::Perceptual, 0.149),
    (AblationVariant::Reid, 0.164),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub report: MetricReport,
}

/// One column per variant, one row per metric.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

const METRICS: [&str; 4] = ["ssim", "mask_ssim", "is", "mask_is"];

fn metric(r: &MetricReport, name: &str) -> f64 {
    match name {
        "ssim" => r.ssim,
        "mask_ssim" => r.mask_ssim,
        "is" => r.is_score,
        _ => r.mask_is,
    }
}

impl AblationTable {
    pub fn variants(&self) -> Vec<AblationVariant> {
        self.rows.iter().map(|r| r.variant).collect()
    }

    pub fn value(&self, variant: AblationVariant, metric_name: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .map(|r| metric(&r.report, metric_name))
    }

    /// Aligned text. A trailing `reference ssim` row shows the full-scale
    /// figures where one exists.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.variant.name().len())
            .max()
            .unwrap_or(0)
            .max(10);
        let label = 14;
        let mut s = format!("{:<label$}", "metric");
        for r in &self.rows {
            write!(s, " {:>width$}", r.variant.name()).unwrap();
        }
        s.push('\n');
        for m in METRICS {
            write!(s, "{:<label$}", m).unwrap();
            for r in &self.rows {
                write!(s, " {:>width$.4}", metric(&r.report, m)).unwrap();
            }
            s.push('\n');
        }
        write!(s, "{:<label$}", "reference ssim").unwrap();
        for r in &self.rows {
            match REFERENCE_SSIM.iter().find(|(v, _)| *v == r.variant) {
                Some((_, x)) => write!(s, " {:>width$.3}", x).unwrap(),
                None => write!(s, " {:>width$}", "-").unwrap(),
            }
        }
        s.push('\n');
        s
    }

    /// `<variant>.<metric> = <value>` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            for m in METRICS {
                writeln!(s, "{}.{} = {}", r.variant.name(), m, metric(&r.report, m)).unwrap();
            }
            writeln!(s, "{}.n_images = {}", r.variant.name(), r.report.n_images).unwrap();
        }
        s
    }
}

/// Resolves variant names, rejecting unknown ones.
pub fn parse_variants<S: AsRef<str>>(names: &[S]) -> Result<Vec<AblationVariant>> {
    names.iter().map(|n| n.as_ref().parse()).collect()
}

/// Trains every variant from the same seed and initialization, then scores
/// each on `test` with the part-based identity network as classifier.
pub fn run_ablation(
    grid: &[AblationVariant],
    base: &TrainConfig,
    train_index: &DatasetIndex,
    test_index: &DatasetIndex,
    env: &TrainEnv,
    eval: &EvalConfig,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::config("ablation grid is empty"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &variant in grid {
        let config = TrainConfig {
            loss_variant: variant,
            ..base.clone()
        };
        let set = prepare_training_set(train_index, env, &config)?;
        let outcome = train(&config, &set, env, None)?;
        let report = evaluate(&outcome.state.generator, test_index, &env.idnet, eval)?;
        log::info!("variant {} mask_ssim {:.4}", variant, report.mask_ssim);
        rows.push(AblationRow { variant, report });
    }
    Ok(AblationTable { rows })
}
