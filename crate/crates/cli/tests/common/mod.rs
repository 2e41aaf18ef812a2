use std::path::{Path, PathBuf};

/// A small, fast experiment config.
pub const TINY: &str = r#"
[data]
eta = 1.0
client_count = 6
[data.synthetic]
class_count = 3
dim = 6
per_class_counts = [200, 120, 80]
separation = 8.0
[training]
hidden = [8]
lr = 0.05
local_epochs = 1
rounds = 3
reference_epochs = 20
[attack]
kind = "label_flip"
target_labels = [2]
poison_ratio = 0.5
adversary_fraction = 0.2
[defense]
kind = "fedavg"
[output]
timing = "suppressed"
"#;

#[allow(dead_code)]
pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}
