//! The five-setting ablation: baseline, absolute-scale grouping,
//! relative-scale grouping, position constraint, preference extraction.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::{Grouping, RunConfig};
use crate::harness::metrics::Metrics;
use crate::harness::train::{generate_run_data, train_on};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::S1, Setting::S2, Setting::S3, Setting::S4, Setting::S5];

    pub fn name(self) -> &'static str {
        match self {
            Setting::S1 => "S1",
            Setting::S2 => "S2",
            Setting::S3 => "S3",
            Setting::S4 => "S4",
            Setting::S5 => "S5",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Setting::S1 => "baseline: one group, no position loss, no preference extraction",
            Setting::S2 => "grouping by absolute scale",
            Setting::S3 => "grouping by relative scale",
            Setting::S4 => "relative grouping with position constraint",
            Setting::S5 => "relative grouping, position constraint and preference extraction",
        }
    }

    /// The base config with this setting's switches applied. The base
    /// supplies the position weight and tau used when they are switched on.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.grouping = match self {
            Setting::S1 => Grouping::None,
            Setting::S2 => Grouping::Absolute,
            _ => Grouping::Relative,
        };
        if matches!(self, Setting::S1 | Setting::S2 | Setting::S3) {
            c.lambda.pos = 0.0;
        }
        c.preference = self == Setting::S5;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: Setting,
    pub description: String,
    pub base_config_hash: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Metrics>,
    pub ap_mean: f64,
    pub ap_bucket_means: Vec<Option<f64>>,
    pub scale_std_mean: f64,
    pub center_within_eta_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Matched-scale spread under S3 divided by the S1 value.
    pub scale_std_ratio_s3_s1: f64,
}

impl AblationReport {
    pub fn row(&self, s: Setting) -> &AblationRow {
        self.rows.iter().find(|r| r.setting == s).expect("every setting has a row")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        w.write_record([
            "setting",
            "ap",
            "ap_bucket0",
            "ap_bucket1",
            "ap_bucket2",
            "scale_std_mean",
            "center_within_eta_frac",
            "base_config_hash",
            "config_hash",
        ])?;
        for r in &self.rows {
            let b = |k: usize| r.ap_bucket_means.get(k).copied().flatten().map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                r.setting.name().to_string(),
                r.ap_mean.to_string(),
                b(0),
                b(1),
                b(2),
                r.scale_std_mean.to_string(),
                r.center_within_eta_frac.to_string(),
                r.base_config_hash.clone(),
                r.config_hash.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Trains every setting on every seed. Datasets depend only on the seed, so
/// all settings see the same scenes. Per-run outputs land in
/// `out/<setting>/seed<k>/` and the report in `out/`.
pub fn ablate(base: &RunConfig, seeds: &[u64], out: Option<&Path>) -> Result<AblationReport> {
    base.validate()?;
    let base_hash = base.hash();
    let mut runs: Vec<Vec<Metrics>> = vec![Vec::new(); Setting::ALL.len()];
    for &seed in seeds {
        let mut seeded = base.clone();
        seeded.seed = seed;
        let (train_scenes, val_scenes) = generate_run_data(&seeded)?;
        for (i, s) in Setting::ALL.iter().enumerate() {
            let cfg = s.apply(&seeded);
            let dir = out.map(|o| o.join(s.name()).join(format!("seed{seed}")));
            log::info!("ablation {} seed {seed}", s.name());
            let r = train_on(&cfg, &train_scenes, &val_scenes, dir.as_deref())?;
            runs[i].push(r.final_metrics);
        }
    }
    let rows: Vec<AblationRow> = Setting::ALL
        .iter()
        .zip(runs)
        .map(|(&s, per_seed)| {
            let n_buckets = per_seed.first().map_or(0, |m| m.ap_buckets.len());
            let ap_bucket_means = (0..n_buckets)
                .map(|k| {
                    let v: Vec<f64> = per_seed.iter().filter_map(|m| m.ap_buckets[k]).collect();
                    (!v.is_empty()).then(|| mean(v.into_iter()))
                })
                .collect();
            AblationRow {
                setting: s,
                description: s.description().to_string(),
                base_config_hash: base_hash.clone(),
                config_hash: s.apply(base).hash(),
                seeds: seeds.to_vec(),
                ap_mean: mean(per_seed.iter().map(|m| m.ap)),
                ap_bucket_means,
                scale_std_mean: mean(per_seed.iter().map(|m| m.scale_std_mean)),
                center_within_eta_frac: mean(per_seed.iter().map(|m| m.center_within_eta_frac)),
                per_seed,
            }
        })
        .collect();
    let s1 = rows[0].scale_std_mean;
    let s3 = rows[2].scale_std_mean;
    let report = AblationReport {
        base_config_hash: base_hash,
        seeds: seeds.to_vec(),
        scale_std_ratio_s3_s1: if s1 > 0.0 { s3 / s1 } else { f64::NAN },
        rows,
    };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_toggle_the_right_switches() {
        let base = RunConfig::default();
        let s1 = Setting::S1.apply(&base);
        assert_eq!((s1.grouping, s1.lambda.pos, s1.preference), (Grouping::None, 0.0, false));
        let s2 = Setting::S2.apply(&base);
        assert_eq!((s2.grouping, s2.lambda.pos, s2.preference), (Grouping::Absolute, 0.0, false));
        let s3 = Setting::S3.apply(&base);
        assert_eq!((s3.grouping, s3.lambda.pos, s3.preference), (Grouping::Relative, 0.0, false));
        let s4 = Setting::S4.apply(&base);
        assert_eq!((s4.grouping, s4.lambda.pos, s4.preference), (Grouping::Relative, 5.0, false));
        let s5 = Setting::S5.apply(&base);
        assert_eq!((s5.grouping, s5.lambda.pos, s5.preference), (Grouping::Relative, 5.0, true));
        for s in Setting::ALL {
            let c = s.apply(&base);
            assert_eq!((c.lambda.cls, c.lambda.l1, c.lambda.giou), (2.0, 5.0, 2.0));
            assert_eq!(c.seed, base.seed);
        }
    }

    #[test]
    fn tiny_ablation_report_shape() {
        let base = crate::harness::train::tests::tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let r = ablate(&base, &[0, 1], Some(dir.path())).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert!(r.rows.iter().all(|row| row.base_config_hash == base.hash() && row.per_seed.len() == 2));
        let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        let back: AblationReport = serde_json::from_str(&fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
        assert_eq!(back.rows.len(), 5);
        assert!(dir.path().join("S5/seed1/metrics.csv").exists());
    }
}
