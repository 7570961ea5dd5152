//! Class-partitioned datasets: a synthetic confusable-class generator, a
//! portable-graymap folder ingester, and uniform instance sampling.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Which stage of the few-shot protocol a dataset serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    Validation,
    MetaTest,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::MetaTrain => f.write_str("meta_train"),
            Split::Validation => f.write_str("validation"),
            Split::MetaTest => f.write_str("meta_test"),
        }
    }
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "meta_train" => Ok(Split::MetaTrain),
            "validation" => Ok(Split::Validation),
            "meta_test" => Ok(Split::MetaTest),
            other => Err(Error::config(format!(
                "unknown split `{other}` (expected meta_train|validation|meta_test)"
            ))),
        }
    }
}

/// Labeled instances partitioned by class. Class indices are dense `[0, K)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    d_in: usize,
    split: Split,
    /// Per class: an `n_instances x d_in` feature matrix.
    features: Vec<Array2<f64>>,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn from_parts(
        split: Split,
        features: Vec<Array2<f64>>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::dataset("dataset must contain at least one class"));
        }
        let d_in = features[0].ncols();
        for (c, m) in features.iter().enumerate() {
            if m.nrows() == 0 {
                return Err(Error::dataset(format!("class {c} has no instances")));
            }
            if m.ncols() != d_in {
                return Err(Error::dataset(format!(
                    "class {c} has d_in={}, expected {d_in}",
                    m.ncols()
                )));
            }
        }
        if let Some(names) = &class_names {
            if names.len() != features.len() {
                return Err(Error::dataset("class_names length must equal class count"));
            }
        }
        Ok(Dataset {
            d_in,
            split,
            features,
            class_names,
        })
    }

    pub fn k(&self) -> usize {
        self.features.len()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.features[class].nrows()
    }

    pub fn class_name(&self, class: usize) -> Option<&str> {
        self.class_names.as_ref().map(|n| n[class].as_str())
    }

    pub fn instance(&self, class: usize, index: usize) -> ArrayView1<'_, f64> {
        self.features[class].row(index)
    }

    pub fn class_features(&self, class: usize) -> &Array2<f64> {
        &self.features[class]
    }

    /// Gather the rows `indices` of `class` into a matrix.
    pub fn gather(&self, class: usize, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.d_in));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&self.features[class].row(i));
        }
        out
    }

    /// FNV-1a checksum of the canonical CSV serialization.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.features_csv().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    fn features_csv(&self) -> String {
        let mut out = String::new();
        for (c, m) in self.features.iter().enumerate() {
            for row in m.rows() {
                out.push_str(&format!("{c}"));
                for x in row {
                    out.push(',');
                    out.push_str(&format!("{x}"));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Write `manifest.json` and `features.csv` under `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = DatasetManifest {
            k: self.k(),
            d_in: self.d_in,
            split: self.split,
            per_class_counts: (0..self.k()).map(|c| self.class_len(c)).collect(),
            class_names: self.class_names.clone(),
            source: "features_csv".to_string(),
            checksum: format!("{:016x}", self.checksum()),
        };
        let f = fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(f, &manifest)
            .map_err(|e| Error::dataset(format!("writing manifest: {e}")))?;
        let mut f = fs::File::create(dir.join("features.csv"))?;
        f.write_all(self.features_csv().as_bytes())?;
        Ok(())
    }

    /// Load a dataset previously written by [`Dataset::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: DatasetManifest = serde_json::from_str(
            &fs::read_to_string(&manifest_path)
                .map_err(|e| Error::dataset(format!("{}: {e}", manifest_path.display())))?,
        )
        .map_err(|e| Error::dataset(format!("bad manifest: {e}")))?;
        let text = fs::read_to_string(dir.join("features.csv"))?;
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); manifest.k];
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let class: usize = parts
                .next()
                .unwrap()
                .parse()
                .map_err(|e| Error::parse(lineno + 1, format!("bad class index: {e}")))?;
            if class >= manifest.k {
                return Err(Error::parse(
                    lineno + 1,
                    format!("class {class} out of range for k={}", manifest.k),
                ));
            }
            let mut count = 0;
            for p in parts {
                per_class[class].push(
                    p.parse::<f64>()
                        .map_err(|e| Error::parse(lineno + 1, format!("bad number: {e}")))?,
                );
                count += 1;
            }
            if count != manifest.d_in {
                return Err(Error::parse(
                    lineno + 1,
                    format!("expected {} features, got {count}", manifest.d_in),
                ));
            }
        }
        let features = per_class
            .into_iter()
            .enumerate()
            .map(|(c, flat)| {
                let rows = flat.len() / manifest.d_in;
                Array2::from_shape_vec((rows, manifest.d_in), flat)
                    .map_err(|e| Error::dataset(format!("class {c}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset::from_parts(manifest.split, features, manifest.class_names)?;
        for (c, &n) in manifest.per_class_counts.iter().enumerate() {
            if ds.class_len(c) != n {
                return Err(Error::dataset(format!(
                    "class {c} has {} instances, manifest says {n}",
                    ds.class_len(c)
                )));
            }
        }
        Ok(ds)
    }

    /// Re-tag the split of this dataset.
    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    k: usize,
    d_in: usize,
    split: Split,
    per_class_counts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    source: String,
    checksum: String,
}

/// Parameters of the synthetic confusable-class generator.
///
/// The generator emits `pairs` pairs of Gaussian clusters whose centers sit
/// `delta_pair` apart (the confusable classes) plus `k - 2*pairs` singleton
/// clusters; centers of different pairs/singletons are at least `delta_far`
/// apart. Classes `[0, 2*pairs)` are the paired ones, with classes `2p` and
/// `2p+1` forming pair `p`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub k: usize,
    pub pairs: usize,
    pub d_in: usize,
    pub sigma_within: f64,
    pub delta_pair: f64,
    pub delta_far: f64,
    pub n_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("synthetic spec needs k >= 2"));
        }
        if 2 * self.pairs > self.k {
            return Err(Error::config(format!(
                "2*pairs = {} exceeds k = {}",
                2 * self.pairs,
                self.k
            )));
        }
        if self.d_in == 0 || self.n_per_class == 0 {
            return Err(Error::config("d_in and n_per_class must be positive"));
        }
        if !(self.sigma_within > 0.0) || !(self.delta_far > 0.0) {
            return Err(Error::config("sigma_within and delta_far must be positive"));
        }
        if self.delta_pair < 0.0 || self.delta_pair >= self.delta_far {
            return Err(Error::config("need 0 <= delta_pair < delta_far"));
        }
        Ok(())
    }
}

/// A generated dataset together with the true class centers (row per class),
/// kept for oracle checks and confusable-pair bookkeeping.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub centers: Array2<f64>,
    pub spec: SyntheticSpec,
}

impl SyntheticDataset {
    /// Class indices that belong to a confusable pair.
    pub fn paired_classes(&self) -> Vec<usize> {
        (0..2 * self.spec.pairs).collect()
    }

    /// Class indices without a confusable mate.
    pub fn unpaired_classes(&self) -> Vec<usize> {
        (2 * self.spec.pairs..self.spec.k).collect()
    }
}

const ANCHOR_ATTEMPTS: usize = 10_000;

/// Generate a synthetic dataset of Gaussian class clusters per `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(generate_synthetic_detailed(spec)?.dataset)
}

/// As [`generate_synthetic`] but also returns the true class centers.
///
/// Pair anchors and singleton centers vary only in the leading "coarse"
/// coordinates; the offset separating a pair's two centers lives in the
/// trailing third of the coordinates. Separating paired classes therefore
/// requires attending to the same trailing coordinates for every pair, so
/// what a learner picks up on the meta-training pairs carries over to the
/// pairs of an independently generated meta-test dataset.
pub fn generate_synthetic_detailed(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "synthetic");
    let d = spec.d_in;
    let d_fine = if spec.pairs > 0 { (d / 3).max(1) } else { 0 };
    let d_coarse = d - d_fine;
    if spec.pairs > 0 && d_coarse == 0 {
        return Err(Error::config("d_in too small to host paired classes"));
    }

    let n_anchors = spec.k - spec.pairs;
    // Anchors must keep classes of different anchors >= delta_far apart even
    // after the +-delta_pair/2 pair offsets.
    let min_gap = spec.delta_far + spec.delta_pair;
    let radius = 1.5 * min_gap;
    let mut anchors: Vec<Array1<f64>> = Vec::with_capacity(n_anchors);
    for a in 0..n_anchors {
        let mut placed = false;
        for _ in 0..ANCHOR_ATTEMPTS {
            let cand = radius * unit_vector(d_coarse.max(1), &mut rng);
            if anchors
                .iter()
                .all(|prev| euclidean(&prev.view(), &cand.view()) >= min_gap)
            {
                anchors.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::config(format!(
                "could not place anchor {a}: packing {n_anchors} centers at \
                 spacing {min_gap} in {d_coarse} dimensions is infeasible"
            )));
        }
    }

    let mut centers = Array2::zeros((spec.k, d));
    for p in 0..spec.pairs {
        let offset = (spec.delta_pair / 2.0) * unit_vector(d_fine, &mut rng);
        for (member, sign) in [(2 * p, 1.0), (2 * p + 1, -1.0)] {
            let mut row = centers.row_mut(member);
            for (j, &v) in anchors[p].iter().enumerate().take(d_coarse) {
                row[j] = v;
            }
            for (j, &v) in offset.iter().enumerate() {
                row[d_coarse + j] = sign * v;
            }
        }
    }
    for (s, anchor) in anchors.iter().enumerate().skip(spec.pairs) {
        let class = spec.pairs + s; // = 2*pairs + (s - pairs)
        let mut row = centers.row_mut(class);
        for (j, &v) in anchor.iter().enumerate().take(d_coarse.max(1).min(d)) {
            row[j] = v;
        }
    }

    let noise = Normal::new(0.0, spec.sigma_within)
        .map_err(|e| Error::config(format!("bad sigma_within: {e}")))?;
    let mut features = Vec::with_capacity(spec.k);
    for c in 0..spec.k {
        let mut m = Array2::zeros((spec.n_per_class, d));
        for mut row in m.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = centers[[c, j]] + noise.sample(&mut rng);
            }
        }
        features.push(m);
    }
    let dataset = Dataset::from_parts(Split::MetaTrain, features, None)?;
    Ok(SyntheticDataset {
        dataset,
        centers,
        spec: spec.clone(),
    })
}

fn unit_vector(d: usize, rng: &mut Stream) -> Array1<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Array1<f64> = Array1::from_iter((0..d).map(|_| normal.sample(rng)));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

fn euclidean(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Restrict a dataset to a uniformly drawn subset of `way` classes
/// (re-indexed densely, ascending original order).
pub fn subset_classes(dataset: &Dataset, way: usize, rng: &mut Stream) -> Result<Dataset> {
    if way < 2 || way > dataset.k() {
        return Err(Error::config(format!(
            "way {way} invalid for a dataset with {} classes",
            dataset.k()
        )));
    }
    let mut picks: Vec<usize> = index_sample(rng, dataset.k(), way).into_iter().collect();
    picks.sort_unstable();
    let features = picks
        .iter()
        .map(|&c| dataset.class_features(c).clone())
        .collect();
    let names = picks
        .iter()
        .map(|&c| dataset.class_name(c).map(str::to_string))
        .collect::<Option<Vec<_>>>();
    Dataset::from_parts(dataset.split(), features, names)
}

/// Draw `n` distinct instance indices of `class`, uniformly, disjoint from
/// `exclude`.
pub fn sample_instances(
    dataset: &Dataset,
    class: usize,
    n: usize,
    rng: &mut Stream,
    exclude: &[usize],
) -> Result<Vec<usize>> {
    if class >= dataset.k() {
        return Err(Error::dataset(format!(
            "class {class} out of range for k={}",
            dataset.k()
        )));
    }
    let len = dataset.class_len(class);
    let excluded: HashSet<usize> = exclude.iter().copied().collect();
    let available: Vec<usize> = (0..len).filter(|i| !excluded.contains(i)).collect();
    if available.len() < n {
        return Err(Error::dataset(format!(
            "class {class} has {} available instances, need {n}",
            available.len()
        )));
    }
    let picks = index_sample(rng, available.len(), n);
    Ok(picks.into_iter().map(|i| available[i]).collect())
}

/// Ingest a directory tree `root/<class_name>/<image>.pgm` of grayscale
/// portable graymaps. Pixels are scaled to `[0,1]`, images resized
/// (nearest neighbor) to `image_size x image_size` and flattened, so
/// `d_in = image_size^2`. With `rotations`, each of the 90/180/270-degree
/// rotations of a class becomes an additional class (K quadruples).
pub fn ingest_image_folders(root: &Path, image_size: usize, rotations: bool) -> Result<Dataset> {
    if image_size == 0 {
        return Err(Error::config("image_size must be positive"));
    }
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(root)
        .map_err(|e| Error::dataset(format!("{}: {e}", root.display())))?
    {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            class_dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::dataset(format!(
            "{} contains no class directories",
            root.display()
        )));
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut base: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (name, dir) in &class_dirs {
        let mut images = Vec::new();
        let mut entries: Vec<_> = fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        entries.sort();
        for path in entries {
            if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
                continue;
            }
            match read_pgm(&path) {
                Ok((pixels, w, h)) => images.push(resize_nearest(&pixels, w, h, image_size)),
                Err(e) => eprintln!("warning: skipping {}: {e}", path.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::dataset(format!(
                "class directory {} has no decodable images",
                dir.display()
            )));
        }
        base.push((name.clone(), images));
    }

    let suffixes = ["", "_rot90", "_rot180", "_rot270"];
    let turns = if rotations { 4 } else { 1 };
    let mut features = Vec::new();
    let mut names = Vec::new();
    for (name, images) in &base {
        for (turn, suffix) in suffixes.iter().enumerate().take(turns) {
            let rows: Vec<Vec<f64>> = images
                .iter()
                .map(|img| {
                    let mut out = img.clone();
                    for _ in 0..turn {
                        out = rotate90(&out, image_size);
                    }
                    out
                })
                .collect();
            let mut m = Array2::zeros((rows.len(), image_size * image_size));
            for (r, row) in rows.iter().enumerate() {
                m.row_mut(r).assign(&Array1::from_vec(row.clone()));
            }
            features.push(m);
            names.push(format!("{name}{suffix}"));
        }
    }
    Dataset::from_parts(Split::MetaTrain, features, Some(names))
}

/// Rotate a flattened square image 90 degrees clockwise.
pub fn rotate90(pixels: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels.len()];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] = pixels[(size - 1 - c) * size + r];
        }
    }
    out
}

fn resize_nearest(pixels: &[f64], w: usize, h: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        let src_r = (r * h) / size;
        for c in 0..size {
            let src_c = (c * w) / size;
            out[r * size + c] = pixels[src_r * w + src_c];
        }
    }
    out
}

/// Minimal PGM reader (P2 ascii and P5 binary, maxval <= 255).
fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let raw = fs::read(path)?;
    let mut pos = 0;

    fn next_token(raw: &[u8], pos: &mut usize) -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < raw.len() && raw[*pos] == b'#' {
                while *pos < raw.len() && raw[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::invalid("truncated pgm header"));
        }
        Ok(String::from_utf8_lossy(&raw[start..*pos]).into_owned())
    }

    let magic = next_token(&raw, &mut pos)?;
    let w: usize = next_token(&raw, &mut pos)?
        .parse()
        .map_err(|_| Error::invalid("bad pgm width"))?;
    let h: usize = next_token(&raw, &mut pos)?
        .parse()
        .map_err(|_| Error::invalid("bad pgm height"))?;
    let maxval: usize = next_token(&raw, &mut pos)?
        .parse()
        .map_err(|_| Error::invalid("bad pgm maxval"))?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::invalid("unsupported pgm dimensions or maxval"));
    }
    let scale = 1.0 / maxval as f64;
    let mut pixels = Vec::with_capacity(w * h);
    match magic.as_str() {
        "P2" => {
            for _ in 0..w * h {
                let v: usize = next_token(&raw, &mut pos)?
                    .parse()
                    .map_err(|_| Error::invalid("bad pgm pixel"))?;
                pixels.push(v as f64 * scale);
            }
        }
        "P5" => {
            pos += 1; // single whitespace after maxval
            if raw.len() < pos + w * h {
                return Err(Error::invalid("truncated pgm pixel data"));
            }
            pixels.extend(raw[pos..pos + w * h].iter().map(|&b| f64::from(b) * scale));
        }
        other => return Err(Error::invalid(format!("unsupported pgm magic `{other}`"))),
    }
    Ok((pixels, w, h))
}

/// Partition classes into meta-train/validation/meta-test datasets.
///
/// Classes whose names differ only by a `_rot90`/`_rot180`/`_rot270` suffix
/// are kept in the same split.
pub fn partition_by_class(
    dataset: &Dataset,
    n_train: usize,
    n_val: usize,
    rng: &mut Stream,
) -> Result<(Dataset, Dataset, Dataset)> {
    let k = dataset.k();
    // Group classes by base name (identity groups when unnamed).
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of_base: std::collections::HashMap<String, usize> =
        std::collections::HashMap::new();
    for c in 0..k {
        let base = match dataset.class_name(c) {
            Some(name) => name
                .strip_suffix("_rot90")
                .or_else(|| name.strip_suffix("_rot180"))
                .or_else(|| name.strip_suffix("_rot270"))
                .unwrap_or(name)
                .to_string(),
            None => format!("class_{c}"),
        };
        match group_of_base.get(&base) {
            Some(&g) => groups[g].push(c),
            None => {
                group_of_base.insert(base, groups.len());
                groups.push(vec![c]);
            }
        }
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    // Fisher-Yates over groups.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut counts = [0usize; 3];
    let mut assignment = vec![0usize; k];
    let mut assigned_train = 0;
    let mut assigned_val = 0;
    for &g in &order {
        let bucket = if assigned_train < n_train {
            assigned_train += groups[g].len();
            0
        } else if assigned_val < n_val {
            assigned_val += groups[g].len();
            1
        } else {
            2
        };
        for &c in &groups[g] {
            assignment[c] = bucket;
            counts[bucket] += 1;
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::config(format!(
            "class partition left an empty split: {counts:?}"
        )));
    }
    let build = |bucket: usize, split: Split| -> Result<Dataset> {
        let mut features = Vec::new();
        let mut names = Vec::new();
        for c in 0..k {
            if assignment[c] == bucket {
                features.push(dataset.class_features(c).clone());
                if let Some(n) = dataset.class_name(c) {
                    names.push(n.to_string());
                }
            }
        }
        let names = if names.len() == features.len() {
            Some(names)
        } else {
            None
        };
        Dataset::from_parts(split, features, names)
    };
    Ok((
        build(0, Split::MetaTrain)?,
        build(1, Split::Validation)?,
        build(2, Split::MetaTest)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn toy_spec() -> SyntheticSpec {
        SyntheticSpec {
            k: 6,
            pairs: 1,
            d_in: 6,
            sigma_within: 0.5,
            delta_pair: 1.0,
            delta_far: 8.0,
            n_per_class: 12,
            seed: 11,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&toy_spec()).unwrap();
        let b = generate_synthetic(&toy_spec()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut other = toy_spec();
        other.seed = 12;
        let c = generate_synthetic(&other).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn synthetic_center_geometry_matches_spec() {
        let spec = SyntheticSpec {
            k: 10,
            pairs: 3,
            d_in: 9,
            sigma_within: 0.3,
            delta_pair: 1.5,
            delta_far: 6.0,
            n_per_class: 4,
            seed: 5,
        };
        let out = generate_synthetic_detailed(&spec).unwrap();
        let c = &out.centers;
        for p in 0..spec.pairs {
            let d = euclidean(&c.row(2 * p), &c.row(2 * p + 1));
            assert!((d - spec.delta_pair).abs() < 1e-9, "pair {p} distance {d}");
        }
        for i in 0..spec.k {
            for j in i + 1..spec.k {
                if i / 2 == j / 2 && j < 2 * spec.pairs {
                    continue;
                }
                let d = euclidean(&c.row(i), &c.row(j));
                assert!(d >= spec.delta_far - 1e-9, "classes {i},{j} at {d}");
            }
        }
    }

    #[test]
    fn nearest_center_oracle_on_well_separated_classes() {
        // pairs=0 and delta_far >= 10 sigma: a nearest-true-center classifier
        // must be near-perfect (Gaussian tail at >= 5 sigma per coordinate
        // direction is ~3e-7).
        let spec = SyntheticSpec {
            k: 8,
            pairs: 0,
            d_in: 8,
            sigma_within: 0.5,
            delta_pair: 0.0,
            delta_far: 5.0,
            n_per_class: 50,
            seed: 3,
        };
        let out = generate_synthetic_detailed(&spec).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for c in 0..spec.k {
            for i in 0..spec.n_per_class {
                let x = out.dataset.instance(c, i);
                let best = (0..spec.k)
                    .min_by(|&a, &b| {
                        euclidean(&out.centers.row(a), &x)
                            .partial_cmp(&euclidean(&out.centers.row(b), &x))
                            .unwrap()
                    })
                    .unwrap();
                correct += usize::from(best == c);
                total += 1;
            }
        }
        assert!(
            correct as f64 / total as f64 >= 0.99,
            "accuracy {}",
            correct as f64 / total as f64
        );
    }

    #[test]
    fn identical_pair_centers_when_delta_pair_zero() {
        let mut spec = toy_spec();
        spec.delta_pair = 0.0;
        let out = generate_synthetic_detailed(&spec).unwrap();
        assert_eq!(out.centers.row(0), out.centers.row(1));
    }

    #[test]
    fn synthetic_rejects_bad_specs() {
        let mut spec = toy_spec();
        spec.pairs = 4; // 2*4 > 6
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = toy_spec();
        spec.delta_pair = spec.delta_far;
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn sample_instances_respects_exclusions() {
        let ds = generate_synthetic(&toy_spec()).unwrap();
        let mut rng = substream(1, "test");
        let all = sample_instances(&ds, 0, 12, &mut rng, &[]).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());

        let exclude: Vec<usize> = (0..9).collect();
        let rest = sample_instances(&ds, 0, 3, &mut rng, &exclude).unwrap();
        let mut rest_sorted = rest.clone();
        rest_sorted.sort_unstable();
        assert_eq!(rest_sorted, vec![9, 10, 11]);

        assert!(sample_instances(&ds, 0, 4, &mut rng, &exclude).is_err());
    }

    #[test]
    fn sample_instances_is_uniform() {
        // Chi-square over 100k draws of 1 instance from a 12-instance class.
        let ds = generate_synthetic(&toy_spec()).unwrap();
        let mut rng = substream(2, "test");
        let mut counts = [0usize; 12];
        let draws = 100_000;
        for _ in 0..draws {
            let idx = sample_instances(&ds, 0, 1, &mut rng, &[]).unwrap()[0];
            counts[idx] += 1;
        }
        let expected = draws as f64 / 12.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 99% critical value for 11 degrees of freedom.
        assert!(stat < 24.725, "chi-square statistic {stat}");
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&toy_spec()).unwrap();
        ds.save_dir(dir.path()).unwrap();
        let back = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(back.k(), ds.k());
        assert_eq!(back.d_in(), ds.d_in());
        assert_eq!(back.checksum(), ds.checksum());
        assert_eq!(back.split(), ds.split());
    }

    fn write_pgm_p2(path: &Path, w: usize, h: usize, pixels: &[u8]) {
        let mut s = format!("P2\n# comment\n{w} {h}\n255\n");
        for p in pixels {
            s.push_str(&format!("{p} "));
        }
        fs::write(path, s).unwrap();
    }

    fn write_pgm_p5(path: &Path, w: usize, h: usize, pixels: &[u8]) {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(pixels);
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn ingest_counts_rotations_as_new_classes() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["a", "b"] {
            let cdir = dir.path().join(class);
            fs::create_dir(&cdir).unwrap();
            for i in 0..3 {
                let pixels: Vec<u8> = (0..16).map(|p| (p * 16 + i) as u8).collect();
                if i % 2 == 0 {
                    write_pgm_p2(&cdir.join(format!("{i}.pgm")), 4, 4, &pixels);
                } else {
                    write_pgm_p5(&cdir.join(format!("{i}.pgm")), 4, 4, &pixels);
                }
            }
        }
        let ds = ingest_image_folders(dir.path(), 4, true).unwrap();
        assert_eq!(ds.k(), 8);
        for c in 0..8 {
            assert_eq!(ds.class_len(c), 3);
        }
        assert_eq!(ds.d_in(), 16);
        assert_eq!(ds.class_name(0), Some("a"));
        assert_eq!(ds.class_name(1), Some("a_rot90"));
    }

    #[test]
    fn solid_black_image_maps_to_zero_vector() {
        let dir = tempfile::tempdir().unwrap();
        let cdir = dir.path().join("black");
        let other = dir.path().join("other");
        fs::create_dir(&cdir).unwrap();
        fs::create_dir(&other).unwrap();
        write_pgm_p5(&cdir.join("img.pgm"), 4, 4, &[0u8; 16]);
        write_pgm_p5(&other.join("img.pgm"), 4, 4, &[255u8; 16]);
        let ds = ingest_image_folders(dir.path(), 4, false).unwrap();
        assert!(ds.instance(0, 0).iter().all(|&x| x == 0.0));
        assert!(ds.instance(1, 0).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn rotating_twice_equals_half_turn() {
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let twice = rotate90(&rotate90(&img, 4), 4);
        let mut half = vec![0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                half[r * 4 + c] = img[(3 - r) * 4 + (3 - c)];
            }
        }
        assert_eq!(twice, half);
    }

    #[test]
    fn ingest_rejects_empty_class_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("empty")).unwrap();
        assert!(ingest_image_folders(dir.path(), 4, false).is_err());
    }

    #[test]
    fn partition_keeps_rotations_together() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["a", "b", "c", "d"] {
            let cdir = dir.path().join(class);
            fs::create_dir(&cdir).unwrap();
            write_pgm_p5(&cdir.join("0.pgm"), 2, 2, &[1, 2, 3, 4]);
        }
        let ds = ingest_image_folders(dir.path(), 2, true).unwrap();
        assert_eq!(ds.k(), 16);
        let mut rng = substream(7, "split");
        let (train, val, test) = partition_by_class(&ds, 8, 4, &mut rng).unwrap();
        assert_eq!(train.k() + val.k() + test.k(), 16);
        // Every split holds whole rotation groups (multiples of 4).
        assert_eq!(train.k() % 4, 0);
        assert_eq!(val.k() % 4, 0);
        assert_eq!(test.k() % 4, 0);
    }
}
