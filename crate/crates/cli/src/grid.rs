//! Sweep grids: a Cartesian product over a fixed set of config axes.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use weidetect_core::aggregation::AggregatorKind;
use weidetect_core::attacks::AttackKind;
use weidetect_core::config::ExperimentConfig;

/// Axes that may vary across a sweep. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub poison_ratio: Vec<f64>,
    pub attack_kind: Vec<AttackKind>,
    pub defense_kind: Vec<AggregatorKind>,
    pub aux_volume: Vec<f64>,
    pub target_labels: Vec<Vec<usize>>,
}

/// One point of the grid. `None` means "as in the base config".
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub poison_ratio: Option<f64>,
    pub attack_kind: Option<AttackKind>,
    pub defense_kind: Option<AggregatorKind>,
    pub aux_volume: Option<f64>,
    pub target_labels: Option<Vec<usize>>,
}

fn axis<T: Clone>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().cloned().map(Some).collect()
    }
}

impl GridSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading grid {}", path.display()))?;
        let grid: GridSpec =
            toml::from_str(&text).with_context(|| format!("parsing grid {}", path.display()))?;
        grid.check()?;
        Ok(grid)
    }

    fn check(&self) -> Result<()> {
        if let Some(r) = self.poison_ratio.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            bail!("poison_ratio: {r} is outside [0, 1]");
        }
        if let Some(v) = self.aux_volume.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            bail!("aux_volume: {v} is outside (0, 1]");
        }
        Ok(())
    }

    /// Cells in a fixed nesting order: target labels, attack, aux volume,
    /// poison ratio, defense (innermost).
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for target_labels in axis(&self.target_labels) {
            for attack_kind in axis(&self.attack_kind) {
                for aux_volume in axis(&self.aux_volume) {
                    for poison_ratio in axis(&self.poison_ratio) {
                        for defense_kind in axis(&self.defense_kind) {
                            cells.push(Cell {
                                index: cells.len(),
                                poison_ratio,
                                attack_kind,
                                defense_kind,
                                aux_volume,
                                target_labels: target_labels.clone(),
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

impl Cell {
    /// Base config with this cell's overrides. Changing the targets drops
    /// an explicit flip map so the default is recomputed.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        if let Some(r) = self.poison_ratio {
            cfg.attack.poison_ratio = r;
        }
        if let Some(k) = self.attack_kind {
            cfg.attack.kind = k;
        }
        if let Some(k) = self.defense_kind {
            cfg.defense.kind = k;
        }
        if let Some(v) = self.aux_volume {
            cfg.defense.aux_volume = v;
        }
        if let Some(t) = &self.target_labels {
            if &cfg.attack.target_labels != t {
                cfg.attack.flip_map.clear();
            }
            cfg.attack.target_labels = t.clone();
        }
        cfg
    }

    /// Directory name, unique through the index prefix.
    pub fn dir_name(&self) -> String {
        let mut name = format!("cell-{:03}", self.index);
        if let Some(t) = &self.target_labels {
            let joined: Vec<String> = t.iter().map(|c| c.to_string()).collect();
            name.push_str(&format!("_t{}", joined.join("-")));
        }
        if let Some(k) = self.attack_kind {
            name.push_str(&format!("_{k}"));
        }
        if let Some(v) = self.aux_volume {
            name.push_str(&format!("_vol{v}"));
        }
        if let Some(r) = self.poison_ratio {
            name.push_str(&format!("_p{r}"));
        }
        if let Some(k) = self.defense_kind {
            name.push_str(&format!("_{k}"));
        }
        name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_is_one_base_cell() {
        let cells = GridSpec::default().cells();
        assert_eq!(cells.len(), 1);
        let base = ExperimentConfig::default();
        assert_eq!(cells[0].apply(&base), base);
        assert_eq!(cells[0].dir_name(), "cell-000");
    }

    #[test]
    fn product_size_and_order() {
        let grid: GridSpec = toml::from_str(
            r#"
            poison_ratio = [0.1, 0.2, 0.3, 0.4, 0.5]
            defense_kind = ["fedavg", "weidetect"]
            "#,
        )
        .unwrap();
        let cells = grid.cells();
        assert_eq!(cells.len(), 10);
        assert_eq!(cells[0].defense_kind, Some(AggregatorKind::FedAvg));
        assert_eq!(cells[1].defense_kind, Some(AggregatorKind::WeiDetect));
        assert_eq!(cells[1].poison_ratio, Some(0.1));
        assert_eq!(cells[2].poison_ratio, Some(0.2));
    }

    #[test]
    fn unknown_axis_is_rejected() {
        let err = toml::from_str::<GridSpec>("learning_rate = [0.1]").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn target_change_clears_flip_map() {
        let mut base = ExperimentConfig::default();
        base.attack.target_labels = vec![1];
        base.attack.flip_map = vec![(1, 0)];
        let cell = Cell {
            index: 0,
            poison_ratio: None,
            attack_kind: None,
            defense_kind: None,
            aux_volume: None,
            target_labels: Some(vec![2]),
        };
        let cfg = cell.apply(&base);
        assert!(cfg.attack.flip_map.is_empty());
        assert_eq!(cfg.attack.target_labels, vec![2]);
    }
}
