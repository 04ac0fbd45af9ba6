use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{child_seed, procedural_corpus, ShapeClass};
use super::image::{decode_pgm, encode_pgm, Image};
use crate::error::{Error, Result};
use crate::geometry::{
    random_homography, warp_image, Homography, HomographyBounds, HomographyParams,
};
use crate::home_loss::NeighborGraph;

pub const MANIFEST_FILE: &str = "manifest.json";
const HOMOGRAPHY_STREAM: u64 = u64::MAX;
const AUX_STREAM: u64 = u64::MAX - 1;
const PARAM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One time index of a multi-view sample. View 0 is the original ("C").
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub views: Vec<Image>,
    pub label: usize,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub name: String,
    pub params: HomographyParams,
    pub matrix: [f64; 9],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub label: usize,
    pub split: Split,
    pub crc32: u32,
}

/// `manifest.json`. For each view, `params`/`matrix` give the transform from
/// its chain parent: `L` and `R` hang off `C`, and view `k ≥ 3` off view `k-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub classes: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub views: Vec<ViewEntry>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub count: usize,
    pub classes: usize,
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub bounds: HomographyBounds,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 1000,
            classes: 4,
            width: 16,
            height: 16,
            views: 3,
            bounds: HomographyBounds::default(),
        }
    }
}

fn view_name(k: usize) -> String {
    match k {
        0 => "C".into(),
        1 => "L".into(),
        2 => "R".into(),
        _ => format!("R{}", k - 1),
    }
}

/// Chain order of views `[L, C, R, R2, …]` and the homography along each edge,
/// given the per-view parent transforms (`parent_h[k]` maps view k's parent
/// onto view k; entry 0 is unused).
fn chain_layout(parent_h: &[Homography]) -> Result<(Vec<usize>, Vec<Homography>)> {
    let n = parent_h.len();
    if n == 2 {
        return Ok((vec![0, 1], vec![parent_h[1]]));
    }
    let mut order = vec![1, 0];
    let mut edges = vec![parent_h[1].invert()?];
    for (k, h) in parent_h.iter().enumerate().skip(2) {
        order.push(k);
        edges.push(*h);
    }
    Ok((order, edges))
}

/// Graph for views generated by [`make_multiview_chain`].
pub fn multiview_graph(parent_h: &[Homography]) -> Result<NeighborGraph> {
    let (order, edges) = chain_layout(parent_h)?;
    NeighborGraph::chain_with_order(&order, &edges)
}

/// Warps each original frame into every view. `view_h[k-1]` is the transform
/// of view `k` from its parent (view 0 for `k ≤ 2`, view `k-1` beyond).
/// All views are rendered directly from the original using the cumulative
/// transform, and every image is snapped to 8-bit levels.
pub fn make_multiview_chain(
    corpus: &[(Image, usize)],
    view_h: &[Homography],
) -> Result<(Vec<MultiViewSample>, NeighborGraph)> {
    let mut parent_h = vec![Homography::IDENTITY];
    parent_h.extend_from_slice(view_h);
    let mut cumulative = vec![Homography::IDENTITY];
    for (k, h) in view_h.iter().enumerate() {
        let view = k + 1;
        cumulative.push(if view <= 2 {
            *h
        } else {
            Homography::compose(h, &cumulative[view - 1])
        });
    }
    let samples = corpus
        .iter()
        .map(|(img, label)| {
            let original = img.quantized();
            let mut views = vec![original.clone()];
            for h in &cumulative[1..] {
                views.push(warp_image(&original, h)?.quantized());
            }
            Ok(MultiViewSample {
                views,
                label: *label,
                t: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, multiview_graph(&parent_h)?))
}

/// Three-view `[C, L, R]` generation; graph is the chain L–C–R with
/// `H_CL = h_l` and `H_CR = h_r`.
pub fn make_multiview(
    corpus: &[(Image, usize)],
    h_l: &Homography,
    h_r: &Homography,
) -> Result<(Vec<MultiViewSample>, NeighborGraph)> {
    make_multiview_chain(corpus, &[*h_l, *h_r])
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<MultiViewSample>,
    pub graph: NeighborGraph,
}

fn split_counts(count: usize) -> (usize, usize) {
    let train = (count as f64 * 0.8).round() as usize;
    let val = (count as f64 * 0.1).round() as usize;
    (train, val.min(count - train))
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
        if config.views < 2 {
            return Err(Error::BadConfig(format!(
                "need at least 2 views, got {}",
                config.views
            )));
        }
        if config.count == 0 {
            return Err(Error::BadConfig("count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, HOMOGRAPHY_STREAM));
        let mut params = vec![HomographyParams::IDENTITY];
        for _ in 1..config.views {
            let (_, p) = random_homography(&mut rng, &config.bounds, config.width, config.height)?;
            params.push(p);
        }
        Self::from_params(config, config.seed, &params)
    }

    fn from_params(
        config: &DatasetConfig,
        corpus_seed: u64,
        params: &[HomographyParams],
    ) -> Result<Dataset> {
        let corpus = procedural_corpus(
            corpus_seed,
            config.count,
            config.classes,
            config.width,
            config.height,
        )?;
        let homs = params
            .iter()
            .map(|p| p.to_homography(config.width, config.height))
            .collect::<Result<Vec<_>>>()?;
        let (samples, graph) = make_multiview_chain(&corpus, &homs[1..])?;
        let (n_train, n_val) = split_counts(config.count);
        let entries = samples
            .iter()
            .enumerate()
            .map(|(i, s)| SampleEntry {
                file: format!("samples/{i:06}.pgm"),
                label: s.label,
                split: if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                },
                crc32: crc32fast::hash(&sample_file_bytes(s)),
            })
            .collect();
        let manifest = Manifest {
            seed: config.seed,
            classes: ShapeClass::ALL[..config.classes]
                .iter()
                .map(|c| c.name().to_string())
                .collect(),
            width: config.width,
            height: config.height,
            views: params
                .iter()
                .zip(&homs)
                .enumerate()
                .map(|(k, (p, h))| ViewEntry {
                    name: view_name(k),
                    params: *p,
                    matrix: h.to_row_major(),
                })
                .collect(),
            samples: entries,
        };
        Ok(Dataset {
            manifest,
            samples,
            graph,
        })
    }

    /// A disjoint corpus with the same views and size, drawn from a derived
    /// seed, for supervised encoder pretraining.
    pub fn auxiliary(&self) -> Result<Dataset> {
        let m = &self.manifest;
        let config = DatasetConfig {
            seed: m.seed,
            count: m.samples.len(),
            classes: m.classes.len(),
            width: m.width,
            height: m.height,
            views: m.views.len(),
            bounds: HomographyBounds::default(),
        };
        let params: Vec<_> = m.views.iter().map(|v| v.params).collect();
        Self::from_params(&config, child_seed(m.seed, AUX_STREAM), &params)
    }

    pub fn n_views(&self) -> usize {
        self.manifest.views.len()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.manifest.width * self.manifest.height
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let samples_dir = dir.join("samples");
        fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
        for (s, entry) in self.samples.iter().zip(&self.manifest.samples) {
            let path = dir.join(&entry.file);
            fs::write(&path, sample_file_bytes(s)).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptManifest(format!("{}: {e}", path.display())))?;
        let homs = validate_manifest(&manifest)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        let n_views = manifest.views.len();
        for entry in &manifest.samples {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (w, h, raster) = decode_pgm(&path, &bytes)?;
            if w != manifest.width || h != manifest.height * n_views {
                return Err(Error::CorruptManifest(format!(
                    "{}: expected {}x{} stacked views, found {w}x{h}",
                    entry.file,
                    manifest.width,
                    manifest.height * n_views
                )));
            }
            let actual = crc32fast::hash(&bytes);
            if actual != entry.crc32 {
                return Err(Error::ChecksumMismatch {
                    file: entry.file.clone(),
                    expected: entry.crc32,
                    actual,
                });
            }
            let plane = manifest.width * manifest.height;
            let views = raster
                .chunks_exact(plane)
                .map(|c| Image::from_bytes(manifest.width, manifest.height, c))
                .collect::<Result<Vec<_>>>()?;
            samples.push(MultiViewSample {
                views,
                label: entry.label,
                t: 0,
            });
        }
        let graph = multiview_graph(&homs)?;
        Ok(Dataset {
            manifest,
            samples,
            graph,
        })
    }
}

/// Views stacked top to bottom in one PGM.
fn sample_file_bytes(s: &MultiViewSample) -> Vec<u8> {
    let (w, h) = (s.views[0].width(), s.views[0].height());
    let raster: Vec<u8> = s.views.iter().flat_map(|v| v.to_bytes()).collect();
    encode_pgm(w, h * s.views.len(), &raster)
}

fn validate_manifest(m: &Manifest) -> Result<Vec<Homography>> {
    let corrupt = |msg: String| Error::CorruptManifest(msg);
    if m.classes.is_empty() {
        return Err(corrupt("no classes".into()));
    }
    if m.width == 0 || m.height == 0 {
        return Err(corrupt(format!("bad image size {}x{}", m.width, m.height)));
    }
    if m.views.len() < 2 {
        return Err(corrupt(format!(
            "need at least 2 views, found {}",
            m.views.len()
        )));
    }
    let mut homs = Vec::with_capacity(m.views.len());
    for (k, v) in m.views.iter().enumerate() {
        if v.name != view_name(k) {
            return Err(corrupt(format!(
                "view {k} should be named {:?}, found {:?}",
                view_name(k),
                v.name
            )));
        }
        let rebuilt = v
            .params
            .to_homography(m.width, m.height)
            .map_err(|e| corrupt(format!("view {}: {e}", v.name)))?;
        let stored = rebuilt.to_row_major();
        if let Some(i) = (0..9).find(|&i| (stored[i] - v.matrix[i]).abs() > PARAM_TOLERANCE) {
            return Err(corrupt(format!(
                "view {}: matrix entry {i} is {} but params give {}",
                v.name, v.matrix[i], stored[i]
            )));
        }
        homs.push(
            Homography::from_row_major(&v.matrix)
                .map_err(|e| corrupt(format!("view {}: {e}", v.name)))?,
        );
    }
    if m.views[0].params != HomographyParams::IDENTITY {
        return Err(corrupt("view C must carry identity params".into()));
    }
    for s in &m.samples {
        if s.label >= m.classes.len() {
            return Err(corrupt(format!(
                "{}: label {} out of range",
                s.file, s.label
            )));
        }
        if s.file.contains("..") || Path::new(&s.file).is_absolute() {
            return Err(corrupt(format!(
                "sample path {:?} escapes the dataset",
                s.file
            )));
        }
    }
    Ok(homs)
}
