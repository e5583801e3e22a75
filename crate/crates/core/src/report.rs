//! Experiment reports: the CSV grid plus a JSON summary with diagnostics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{AccuracyRow, GradientAmplitude, MaskingReport};
use crate::error::Result;

/// Everything one experiment produced, with full provenance: manifest hash,
/// dataset checksums, and every hyperparameter (including defaults the
/// tables depend on).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub tool_version: String,
    pub manifest_hash: String,
    pub dataset_checksums: BTreeMap<String, String>,
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    pub rows: Vec<AccuracyRow>,
    pub gradient_amplitudes: Vec<GradientAmplitude>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masking: Option<MaskingReport>,
}

pub const CSV_HEADER: &str = "experiment_id,model,attack,epsilon,setting,accuracy,n,seed";

impl ExperimentReport {
    /// Stable-order CSV, one accuracy row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.experiment_id,
                r.model,
                r.attack,
                r.epsilon,
                r.setting.as_str(),
                r.accuracy,
                r.n,
                r.seed
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write `<id>.csv` and `<id>.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{}.csv", self.experiment_id)), self.to_csv())?;
        fs::write(dir.join(format!("{}.json", self.experiment_id)), self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Console table mirroring the usual layout: one row per (attack, eps),
    /// one column per model.
    pub fn console_table(&self) -> String {
        let mut models: Vec<String> = Vec::new();
        for r in &self.rows {
            if !models.contains(&r.model) {
                models.push(r.model.clone());
            }
        }
        let mut keys: Vec<(String, u32, &'static str)> = Vec::new();
        for r in &self.rows {
            let k = (r.attack.clone(), r.epsilon, r.setting.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let mut out = format!("{:<22}", "attack/eps/setting");
        for m in &models {
            out.push_str(&format!("{m:>12}"));
        }
        out.push('\n');
        for (attack, eps, setting) in &keys {
            out.push_str(&format!("{:<22}", format!("{attack}/{eps}/{setting}")));
            for m in &models {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| {
                        &r.model == m
                            && &r.attack == attack
                            && r.epsilon == *eps
                            && r.setting.as_str() == *setting
                    })
                    .map(|r| format!("{:.2}", r.accuracy))
                    .unwrap_or_else(|| "-".into());
                out.push_str(&format!("{cell:>12}"));
            }
            out.push('\n');
        }
        if !self.gradient_amplitudes.is_empty() {
            out.push_str("\ngradient amplitude G:\n");
            for g in &self.gradient_amplitudes {
                out.push_str(&format!("  {:<12} G = {:.3e}  (n = {})\n", g.model, g.g, g.n));
            }
        }
        out
    }
}
