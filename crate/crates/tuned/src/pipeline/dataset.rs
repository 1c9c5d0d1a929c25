//! Dataset ingestion, synthetic generation, and conflict injection.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::{SeededRng, Tensor2D};

/// Multi-view dataset: one feature matrix per view over shared samples,
/// integer labels, and disjoint covering train/test index sets. Features
/// are stored z-scored per column with statistics fit on the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub views: Vec<Tensor2D>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl MultiViewDataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.views.is_empty() {
            return Err(Error::Dataset("dataset has no views".to_string()));
        }
        for (v, view) in self.views.iter().enumerate() {
            if view.rows() != n {
                return Err(Error::Dataset(format!(
                    "view {v} has {} rows but there are {n} labels",
                    view.rows()
                )));
            }
            if !view.is_finite() {
                return Err(Error::Dataset(format!("view {v} contains non-finite values")));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        let mut seen = vec![false; n];
        for &i in self.train_idx.iter().chain(&self.test_idx) {
            if i >= n {
                return Err(Error::Dataset(format!("split index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::Dataset(format!("sample {i} appears in both splits")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Dataset("splits do not cover every sample".to_string()));
        }
        Ok(())
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows of one view selected by index list.
    pub fn gather(&self, view: usize, idx: &[usize]) -> Tensor2D {
        let src = &self.views[view];
        let mut out = Tensor2D::zeros(idx.len(), src.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(i));
        }
        out
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Z-scores every column using statistics from the train split.
    /// Constant columns are centered but left unscaled.
    pub fn normalize_on_train(&mut self) {
        let train = self.train_idx.clone();
        for view in &mut self.views {
            let cols = view.cols();
            let mut mean = vec![0.0; cols];
            for &i in &train {
                for (m, &x) in mean.iter_mut().zip(view.row(i)) {
                    *m += x;
                }
            }
            for m in &mut mean {
                *m /= train.len() as f64;
            }
            let mut var = vec![0.0; cols];
            for &i in &train {
                for ((v, &x), m) in var.iter_mut().zip(view.row(i)).zip(&mean) {
                    let d = x - m;
                    *v += d * d;
                }
            }
            let std: Vec<f64> = var
                .iter()
                .map(|v| {
                    let s = (v / train.len() as f64).sqrt();
                    if s > 0.0 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect();
            for r in 0..view.rows() {
                for ((x, m), s) in view.row_mut(r).iter_mut().zip(&mean).zip(&std) {
                    *x = (*x - m) / s;
                }
            }
        }
    }

    /// FNV-1a hash over the train-split feature bits and labels; used to
    /// assert that conflict injection leaves the train split untouched.
    pub fn train_fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x1000_0000_01b3);
        };
        for &i in &self.train_idx {
            for byte in self.labels[i].to_le_bytes() {
                mix(byte);
            }
            for view in &self.views {
                for &x in view.row(i) {
                    for byte in x.to_bits().to_le_bytes() {
                        mix(byte);
                    }
                }
            }
        }
        hash
    }
}

/// Stratified split: within each class the indices are shuffled and the
/// first `train_frac` go to the train split (at least one per class on
/// each side when the class has two or more members).
pub fn stratified_split(
    labels: &[usize],
    classes: usize,
    train_frac: f64,
    rng: &mut SeededRng,
) -> (Vec<usize>, Vec<usize>) {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut members in per_class {
        if members.is_empty() {
            continue;
        }
        rng.shuffle(&mut members);
        let mut cut = ((members.len() as f64) * train_frac).round() as usize;
        if members.len() >= 2 {
            cut = cut.clamp(1, members.len() - 1);
        } else {
            cut = 1;
        }
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn parse_manifest(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Dataset(format!(
                "manifest {}:{}: expected 'key = value'",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn read_numeric_csv(path: &Path) -> Result<Tensor2D> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, cell) in line.split(',').enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| {
                Error::Dataset(format!(
                    "{}:{}: column {} is not numeric: '{}'",
                    path.display(),
                    lineno + 1,
                    col + 1,
                    cell.trim()
                ))
            })?;
            row.push(value);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Dataset(format!(
                    "{}:{}: row has {} columns, expected {}",
                    path.display(),
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!("{} is empty", path.display())));
    }
    Tensor2D::from_rows(&rows)
}

fn read_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: usize = line.parse().map_err(|_| {
            Error::Dataset(format!(
                "{}:{}: label is not a non-negative integer: '{line}'",
                path.display(),
                lineno + 1
            ))
        })?;
        labels.push(value);
    }
    if labels.is_empty() {
        return Err(Error::Dataset(format!("{} is empty", path.display())));
    }
    Ok(labels)
}

fn read_split_csv(path: &Path, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut row = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        match token {
            "train" => train.push(row),
            "test" => test.push(row),
            other => {
                return Err(Error::Dataset(format!(
                    "{}:{}: expected 'train' or 'test', found '{other}'",
                    path.display(),
                    lineno + 1
                )))
            }
        }
        row += 1;
    }
    if row != n {
        return Err(Error::Dataset(format!(
            "{} assigns {row} samples but the dataset has {n}",
            path.display()
        )));
    }
    Ok((train, test))
}

/// Loads a dataset directory: a `manifest.txt` naming one numeric CSV per
/// view plus a labels CSV and an optional split CSV. Without a split file,
/// a stratified split with the given fraction and seed is drawn. Features
/// are z-scored on the train split.
pub fn load_multiview_csv(
    dir: &Path,
    train_frac: f64,
    split_seed: u64,
) -> Result<MultiViewDataset> {
    let manifest = parse_manifest(&dir.join("manifest.txt"))?;
    let view_count: usize = manifest
        .get("views")
        .ok_or_else(|| Error::Dataset("manifest is missing the 'views' key".to_string()))?
        .parse()
        .map_err(|_| Error::Dataset("manifest 'views' is not an integer".to_string()))?;
    if view_count == 0 {
        return Err(Error::Dataset("manifest declares zero views".to_string()));
    }

    let mut views = Vec::with_capacity(view_count);
    let mut view_files: Vec<PathBuf> = Vec::with_capacity(view_count);
    for v in 0..view_count {
        let key = format!("view_{v}");
        let file = manifest
            .get(&key)
            .ok_or_else(|| Error::Dataset(format!("manifest is missing '{key}'")))?;
        let path = dir.join(file);
        views.push(read_numeric_csv(&path)?);
        view_files.push(path);
    }
    let n = views[0].rows();
    for (v, view) in views.iter().enumerate() {
        if view.rows() != n {
            return Err(Error::Dataset(format!(
                "row count mismatch: {} has {} rows, {} has {n}",
                view_files[v].display(),
                view.rows(),
                view_files[0].display()
            )));
        }
    }

    let labels_file = manifest
        .get("labels")
        .ok_or_else(|| Error::Dataset("manifest is missing 'labels'".to_string()))?;
    let labels_path = dir.join(labels_file);
    let labels = read_labels_csv(&labels_path)?;
    if labels.len() != n {
        return Err(Error::Dataset(format!(
            "row count mismatch: {} has {} labels, {} has {n} rows",
            labels_path.display(),
            labels.len(),
            view_files[0].display()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);

    let (train_idx, test_idx) = match manifest.get("split") {
        Some(split_file) => read_split_csv(&dir.join(split_file), n)?,
        None => {
            let mut rng = SeededRng::new(split_seed).derive(0xD5);
            stratified_split(&labels, classes, train_frac, &mut rng)
        }
    };

    let mut dataset = MultiViewDataset {
        views,
        labels,
        classes,
        train_idx,
        test_idx,
    };
    dataset.validate()?;
    dataset.normalize_on_train();
    Ok(dataset)
}

/// Writes a dataset back out in the directory layout `load_multiview_csv`
/// reads, including the split assignment.
pub fn save_multiview_csv(dataset: &MultiViewDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = format!("views = {}\n", dataset.num_views());
    for (v, view) in dataset.views.iter().enumerate() {
        let name = format!("view_{v}.csv");
        let mut text = String::new();
        for r in 0..view.rows() {
            let cells: Vec<String> = view.row(r).iter().map(|x| format!("{x}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(dir.join(&name), text)?;
        manifest.push_str(&format!("view_{v} = {name}\n"));
    }
    let labels_text: String = dataset
        .labels
        .iter()
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(dir.join("labels.csv"), labels_text)?;
    manifest.push_str("labels = labels.csv\n");

    let mut split = vec!["test"; dataset.len()];
    for &i in &dataset.train_idx {
        split[i] = "train";
    }
    let split_text: String = split.iter().map(|s| format!("{s}\n")).collect();
    std::fs::write(dir.join("split.csv"), split_text)?;
    manifest.push_str("split = split.csv\n");

    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Synthetic dataset shape: Gaussian class clusters per view, with a
/// per-view separation factor controlling how informative the view is
/// (zero separation carries no label signal).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub views: usize,
    pub classes: usize,
    pub dim: usize,
    pub separations: Vec<f64>,
    pub train_frac: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn uniform(n: usize, views: usize, classes: usize, dim: usize, sep: f64, seed: u64) -> Self {
        Self {
            n,
            views,
            classes,
            dim,
            separations: vec![sep; views],
            train_frac: 0.8,
            seed,
        }
    }
}

/// Generates Gaussian class clusters per view. Deterministic per seed.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    if spec.views == 0 || spec.classes < 2 || spec.dim == 0 {
        return Err(Error::Config(
            "synthetic spec needs views >= 1, classes >= 2, dim >= 1".to_string(),
        ));
    }
    if spec.n < 4 * spec.classes {
        return Err(Error::Config(format!(
            "synthetic spec needs n >= 4*classes = {}, got {}",
            4 * spec.classes,
            spec.n
        )));
    }
    if spec.separations.len() != spec.views {
        return Err(Error::Config(format!(
            "expected {} separation values, got {}",
            spec.views,
            spec.separations.len()
        )));
    }
    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    let mut rng = SeededRng::new(spec.seed).derive(0x5D);
    let mut views = Vec::with_capacity(spec.views);
    for v in 0..spec.views {
        let sep = spec.separations[v];
        let centers: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| (0..spec.dim).map(|_| sep * rng.normal()).collect())
            .collect();
        let mut view = Tensor2D::zeros(spec.n, spec.dim);
        for (i, &label) in labels.iter().enumerate() {
            for (x, c) in view.row_mut(i).iter_mut().zip(&centers[label]) {
                *x = c + rng.normal();
            }
        }
        views.push(view);
    }
    let mut split_rng = rng.derive(0x51);
    let (train_idx, test_idx) =
        stratified_split(&labels, spec.classes, spec.train_frac, &mut split_rng);
    let mut dataset = MultiViewDataset {
        views,
        labels,
        classes: spec.classes,
        train_idx,
        test_idx,
    };
    dataset.validate()?;
    dataset.normalize_on_train();
    Ok(dataset)
}

/// How conflict is injected into selected views of the test split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConflictMode {
    /// Adds i.i.d. Gaussian noise with the given standard deviation
    /// (features are z-scored, so sigma is in unit-variance units).
    Noise { sigma: f64 },
    /// Replaces each test row with the same-view row of a uniformly drawn
    /// different-class sample.
    Swap,
}

/// Conflict injection request: which views, how, and the noise seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictSpec {
    pub views: Vec<usize>,
    pub mode: ConflictMode,
    pub seed: u64,
}

/// Returns a copy of the dataset with conflict injected into the test
/// rows of the target views. Untouched views are bit-identical.
pub fn inject_conflict(dataset: &MultiViewDataset, spec: &ConflictSpec) -> Result<MultiViewDataset> {
    for &v in &spec.views {
        if v >= dataset.num_views() {
            return Err(Error::Config(format!(
                "conflict view {v} out of range for {} views",
                dataset.num_views()
            )));
        }
    }
    let mut out = dataset.clone();
    let mut rng = SeededRng::new(spec.seed).derive(0xC0);
    match spec.mode {
        ConflictMode::Noise { sigma } => {
            if sigma == 0.0 {
                return Ok(out);
            }
            for &v in &spec.views {
                let view = &mut out.views[v];
                for &i in &dataset.test_idx {
                    for x in view.row_mut(i) {
                        *x += sigma * rng.normal();
                    }
                }
            }
        }
        ConflictMode::Swap => {
            for &v in &spec.views {
                for &i in &dataset.test_idx {
                    let own = dataset.labels[i];
                    let donors: Vec<usize> = (0..dataset.len())
                        .filter(|&j| dataset.labels[j] != own)
                        .collect();
                    if donors.is_empty() {
                        return Err(Error::Dataset(
                            "swap conflict needs at least two classes".to_string(),
                        ));
                    }
                    let donor = donors[rng.usize_below(donors.len())];
                    let row = dataset.views[v].row(donor).to_vec();
                    out.views[v].row_mut(i).copy_from_slice(&row);
                }
            }
        }
    }
    Ok(out)
}
