//! Synthetic flow-and-change dataset forge.
//!
//! Each background pair from a flow dataset (frames plus ground-truth flow)
//! becomes one sample: segmentation cutouts are scaled, rotated, optionally
//! channel-shuffled and alpha-blended into the second frame. The change
//! label is the union of the pasted alpha supports; the flow label is the
//! untouched background flow.

mod cutout;
pub mod io;
pub mod procedural;

pub use cutout::{apply_transform, extract_cutouts, transform_cutout, CutoutTransform, LabelMap, ObjectCutout};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BitemporalSample, ChangeMask, FlowField, Image, MaskKind};
use crate::error::{ensure, Error, Result};
use crate::par::{self, Execution};
use cutout::{draw, fit_transform};
use io::{read_flo, read_gray8, read_mask_png, read_png_rgb, read_text, require_exists, write_flo, write_mask_png, write_png_rgb, write_text};

/// PASCAL VOC object classes; label `i + 1` is `VOC_CLASSES[i]`.
pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PasteTarget {
    /// Objects appear in the second frame.
    #[default]
    T1,
    /// Objects disappear: pasted into the first frame.
    T0,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub scale_range: (f64, f64),
    /// Degrees.
    pub rotation_range: (f64, f64),
    pub channel_shuffle_prob: f64,
    /// Multiplicative brightness factor.
    pub brightness_range: (f64, f64),
    /// Contrast factor about mid-gray.
    pub contrast_range: (f64, f64),
    pub paste_count_range: (usize, usize),
    pub seed: u64,
    /// `(width, height)`.
    pub output_size: (usize, usize),
    pub paste_into: PasteTarget,
    pub alpha_threshold: f64,
    /// Class names to cut out; empty means every class.
    pub classes: Vec<String>,
    pub split: Split,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            scale_range: (0.8, 1.2),
            rotation_range: (-30.0, 30.0),
            channel_shuffle_prob: 0.5,
            brightness_range: (0.8, 1.2),
            contrast_range: (0.8, 1.2),
            paste_count_range: (1, 2),
            seed: 0,
            output_size: (512, 384),
            paste_into: PasteTarget::T1,
            alpha_threshold: 0.5,
            classes: Vec::new(),
            split: Split::Train,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("scale_range", self.scale_range),
            ("rotation_range", self.rotation_range),
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
        ] {
            ensure!(lo <= hi && lo.is_finite() && hi.is_finite(), "{name}: need lo <= hi, got ({lo}, {hi})");
        }
        ensure!(self.scale_range.0 > 0.0, "scale_range must be positive");
        ensure!(self.brightness_range.0 > 0.0, "brightness_range must be positive");
        ensure!(self.contrast_range.0 >= 0.0, "contrast_range must be >= 0");
        ensure!(
            (0.0..=1.0).contains(&self.channel_shuffle_prob),
            "channel_shuffle_prob must lie in [0,1]"
        );
        let (lo, hi) = self.paste_count_range;
        ensure!(lo <= hi, "paste_count_range: need lo <= hi, got ({lo}, {hi})");
        let (w, h) = self.output_size;
        ensure!(
            w >= 16 && h >= 16 && w % 8 == 0 && h % 8 == 0,
            "output_size {w}x{h} must be at least 16 and divisible by 8"
        );
        ensure!(
            self.alpha_threshold > 0.0 && self.alpha_threshold < 1.0,
            "alpha_threshold must lie in (0,1)"
        );
        for c in &self.classes {
            ensure!(VOC_CLASSES.contains(&c.as_str()), "unknown class {c:?}");
        }
        Ok(())
    }
}

/// Where one cutout landed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasteRecord {
    /// Index into the cutout pool.
    pub source: usize,
    pub class_tag: String,
    pub transform: CutoutTransform,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Alpha-blends `cutouts` into one frame, then applies one brightness /
/// contrast draw to both frames and quantizes them to 8 bits.
///
/// Returns the sample and the top-left paste positions.
#[allow(clippy::too_many_arguments)]
pub fn composite_sample(
    id: &str,
    background_t0: &Image,
    background_t1: &Image,
    flow_gt: &FlowField,
    cutouts: &[ObjectCutout],
    cfg: &ForgeConfig,
    rng: &mut impl Rng,
) -> Result<(BitemporalSample, Vec<(usize, usize)>)> {
    let (h, w) = (background_t0.height(), background_t0.width());
    ensure!(
        background_t1.height() == h && background_t1.width() == w,
        "background frames differ in shape"
    );
    ensure!(
        flow_gt.height() == h && flow_gt.width() == w,
        "background flow does not match the frames"
    );
    let mut target = match cfg.paste_into {
        PasteTarget::T1 => background_t1.clone(),
        PasteTarget::T0 => background_t0.clone(),
    };
    let mut label = vec![0.0; h * w];
    let mut positions = Vec::with_capacity(cutouts.len());
    for obj in cutouts {
        ensure!(
            obj.height <= h && obj.width <= w,
            "cutout {}x{} does not fit the {w}x{h} frame",
            obj.width,
            obj.height
        );
        let x = rng.random_range(0..=w - obj.width);
        let y = rng.random_range(0..=h - obj.height);
        positions.push((x, y));
        target = paste(&target, obj, x, y)?;
        stamp_label(&mut label, w, obj, x, y, cfg.alpha_threshold);
    }
    let brightness = draw(rng, cfg.brightness_range);
    let contrast = draw(rng, cfg.contrast_range);
    let (t0, t1) = match cfg.paste_into {
        PasteTarget::T1 => (background_t0, &target),
        PasteTarget::T0 => (&target, background_t1),
    };
    let t0 = adjust(t0, brightness, contrast)?;
    let t1 = adjust(t1, brightness, contrast)?;
    let change = ChangeMask::new(h, w, label, MaskKind::GroundTruth)?;
    Ok((BitemporalSample::new(id, t0, t1, flow_gt.clone(), change)?, positions))
}

fn paste(img: &Image, obj: &ObjectCutout, x0: usize, y0: usize) -> Result<Image> {
    Image::from_fn(img.height(), img.width(), |y, x| {
        let px = [img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2)];
        if y < y0 || x < x0 || y >= y0 + obj.height || x >= x0 + obj.width {
            return px;
        }
        let (oy, ox) = (y - y0, x - x0);
        let a = obj.get(3, oy, ox);
        [0, 1, 2].map(|c| a * obj.get(c, oy, ox) + (1.0 - a) * px[c])
    })
}

/// Marks pixels where the cutout's alpha reaches `threshold`.
pub fn stamp_label(label: &mut [f64], width: usize, obj: &ObjectCutout, x0: usize, y0: usize, threshold: f64) {
    for oy in 0..obj.height {
        for ox in 0..obj.width {
            if obj.get(3, oy, ox) >= threshold {
                label[(y0 + oy) * width + x0 + ox] = 1.0;
            }
        }
    }
}

fn adjust(img: &Image, brightness: f64, contrast: f64) -> Result<Image> {
    let out = Image::from_fn(img.height(), img.width(), |y, x| {
        [0, 1, 2].map(|c| (((img.get(y, x, c) - 0.5) * contrast + 0.5) * brightness).clamp(0.0, 1.0))
    })?;
    Ok(out.quantized())
}

/// Relative file names of one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub t0: String,
    pub t1: String,
    pub flow: String,
    pub change: String,
}

impl SampleFiles {
    pub fn for_id(id: &str) -> Self {
        SampleFiles {
            t0: format!("{id}_t0.png"),
            t1: format!("{id}_t1.png"),
            flow: format!("{id}_flow.flo"),
            change: format!("{id}_change.png"),
        }
    }
}

/// Writes `{id}_t0.png`, `{id}_t1.png`, `{id}_flow.flo`, `{id}_change.png` into `dir`.
pub fn write_sample(dir: &Path, sample: &BitemporalSample) -> Result<SampleFiles> {
    io::create_dir(dir)?;
    let files = SampleFiles::for_id(&sample.id);
    write_png_rgb(&dir.join(&files.t0), &sample.t0)?;
    write_png_rgb(&dir.join(&files.t1), &sample.t1)?;
    write_flo(&dir.join(&files.flow), &sample.flow_label)?;
    write_mask_png(&dir.join(&files.change), &sample.change_label)?;
    Ok(files)
}

pub fn read_sample(dir: &Path, id: &str, files: &SampleFiles) -> Result<BitemporalSample> {
    let t0 = read_png_rgb(&dir.join(&files.t0))?;
    let t1 = read_png_rgb(&dir.join(&files.t1))?;
    let flow = read_flo(&dir.join(&files.flow))?;
    let change = read_mask_png(&dir.join(&files.change))?;
    BitemporalSample::new(id, t0, t1, flow, change)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPair {
    pub id: String,
    pub t0: String,
    pub t1: String,
    pub flow: String,
}

/// Background flow pairs; paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundManifest {
    pub pairs: Vec<BackgroundPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub label: u8,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoutSource {
    pub image: String,
    /// 8-bit label image, 0 = background.
    pub segmentation: String,
}

/// Segmentation sources; paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoutManifest {
    pub classes: Vec<ClassEntry>,
    pub images: Vec<CutoutSource>,
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require_exists(path)?;
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Every cutout of the selected classes, in source order.
pub fn load_cutout_pool(manifest_path: &Path, cfg: &ForgeConfig) -> Result<Vec<ObjectCutout>> {
    let manifest: CutoutManifest = load_json(manifest_path)?;
    let root = parent(manifest_path);
    let wanted: Vec<u8> = manifest
        .classes
        .iter()
        .filter(|c| cfg.classes.is_empty() || cfg.classes.contains(&c.name))
        .map(|c| c.label)
        .collect();
    let mut pool = Vec::new();
    for src in &manifest.images {
        let img_path = root.join(&src.image);
        let seg_path = root.join(&src.segmentation);
        require_exists(&img_path)?;
        require_exists(&seg_path)?;
        let img = read_png_rgb(&img_path)?;
        let (h, w, data) = read_gray8(&seg_path)?;
        let seg = LabelMap {
            height: h,
            width: w,
            data,
        };
        let name = |l: u8| {
            manifest
                .classes
                .iter()
                .find(|c| c.label == l)
                .map(|c| c.name.clone())
                .unwrap_or_else(|| format!("class{l}"))
        };
        pool.extend(extract_cutouts(&img, &seg, &wanted, name)?);
    }
    Ok(pool)
}

fn load_background(root: &Path, pair: &BackgroundPair, (w, h): (usize, usize)) -> Result<(Image, Image, FlowField)> {
    let paths = [&pair.t0, &pair.t1, &pair.flow].map(|p| root.join(p));
    for p in &paths {
        require_exists(p)?;
    }
    let t0 = read_png_rgb(&paths[0])?;
    let t1 = read_png_rgb(&paths[1])?;
    let flow = read_flo(&paths[2])?;
    ensure!(
        t0.height() == t1.height() && t0.width() == t1.width() && flow.height() == t0.height() && flow.width() == t0.width(),
        "background {} has inconsistent frame / flow shapes",
        pair.id
    );
    ensure!(
        t0.width() >= w && t0.height() >= h,
        "background {} ({}x{}) is smaller than the output size {w}x{h}",
        pair.id,
        t0.width(),
        t0.height()
    );
    if t0.width() == w && t0.height() == h {
        return Ok((t0, t1, flow));
    }
    let (oy, ox) = ((t0.height() - h) / 2, (t0.width() - w) / 2);
    let flow = FlowField::from_fn(h, w, |y, x| flow.at(y + oy, x + ox))?;
    Ok((t0.center_crop(h, w)?, t1.center_crop(h, w)?, flow))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub background: String,
    pub files: SampleFiles,
    pub pastes: Vec<PasteRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePaths {
    pub backgrounds: String,
    pub cutouts: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: Split,
    pub config: ForgeConfig,
    pub sources: SourcePaths,
    pub count: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory holding the manifest; sample paths are relative to it.
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    /// Loads a manifest and checks ids are unique and files exist.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: DatasetManifest = load_json(path)?;
        ensure!(m.version == MANIFEST_VERSION, "unsupported manifest version {}", m.version);
        m.root = parent(path);
        let mut ids = std::collections::HashSet::new();
        for e in &m.entries {
            ensure!(ids.insert(e.id.as_str()), "duplicate sample id {}", e.id);
            for f in [&e.files.t0, &e.files.t1, &e.files.flow, &e.files.change] {
                require_exists(&m.root.join(f))?;
            }
        }
        Ok(m)
    }

    pub fn read(&self, entry: &ManifestEntry) -> Result<BitemporalSample> {
        read_sample(&self.root, &entry.id, &entry.files)
    }

    pub fn load_samples(&self) -> Result<Vec<BitemporalSample>> {
        self.entries.iter().map(|e| self.read(e)).collect()
    }
}

/// Random generator for sample `index`: the seed picks the generator and
/// the index its stream. The first draw is the paste count.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Builds one sample per background pair, in order, and writes the samples
/// plus `manifest.json` into `out_dir`.
pub fn forge_dataset(
    backgrounds: &Path,
    cutouts: &Path,
    cfg: &ForgeConfig,
    out_dir: &Path,
    exec: Execution,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let bg: BackgroundManifest = load_json(backgrounds)?;
    ensure!(!bg.pairs.is_empty(), "background manifest {} lists no pairs", backgrounds.display());
    let pool = load_cutout_pool(cutouts, cfg)?;
    ensure!(
        !pool.is_empty() || cfg.paste_count_range.1 == 0,
        "cutout manifest {} yields no cutouts of the requested classes",
        cutouts.display()
    );
    let bg_root = parent(backgrounds);
    for pair in &bg.pairs {
        for p in [&pair.t0, &pair.t1, &pair.flow] {
            require_exists(&bg_root.join(p))?;
        }
    }
    io::create_dir(out_dir)?;
    let (w, h) = cfg.output_size;
    let entries = par::map_ordered(exec, &bg.pairs, |i, pair| -> Result<ManifestEntry> {
        let (b0, b1, flow) = load_background(&bg_root, pair, cfg.output_size)?;
        let mut rng = sample_rng(cfg.seed, i);
        let (lo, hi) = cfg.paste_count_range;
        let count = rng.random_range(lo..=hi);
        let mut chosen = Vec::with_capacity(count);
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let source = rng.random_range(0..pool.len());
            let t = CutoutTransform::sample(cfg, &mut rng);
            let t = fit_transform(&pool[source], t, h, w);
            let obj = apply_transform(&pool[source], &t)?;
            records.push(PasteRecord {
                source,
                class_tag: obj.class_tag.clone(),
                transform: t,
                x: 0,
                y: 0,
                width: obj.width,
                height: obj.height,
            });
            chosen.push(obj);
        }
        let id = format!("{i:05}");
        let (sample, positions) = composite_sample(&id, &b0, &b1, &flow, &chosen, cfg, &mut rng)?;
        for (r, (x, y)) in records.iter_mut().zip(positions) {
            r.x = x;
            r.y = y;
        }
        let files = write_sample(out_dir, &sample)?;
        Ok(ManifestEntry {
            id,
            background: pair.id.clone(),
            files,
            pastes: records,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split: cfg.split,
        config: cfg.clone(),
        sources: SourcePaths {
            backgrounds: backgrounds.display().to_string(),
            cutouts: cutouts.display().to_string(),
        },
        count: entries.len(),
        entries,
        root: out_dir.to_path_buf(),
    };
    write_text(
        &out_dir.join(MANIFEST_FILE),
        &serde_json::to_string_pretty(&manifest).expect("serializable"),
    )?;
    log::info!("forged {} samples into {}", manifest.count, out_dir.display());
    Ok(manifest)
}

/// Change label rebuilt from a manifest entry's paste records.
pub fn replay_change_label(entry: &ManifestEntry, pool: &[ObjectCutout], cfg: &ForgeConfig) -> Result<ChangeMask> {
    let (w, h) = cfg.output_size;
    let mut label = vec![0.0; w * h];
    for r in &entry.pastes {
        ensure!(r.source < pool.len(), "paste source {} out of range", r.source);
        let obj = apply_transform(&pool[r.source], &r.transform)?;
        ensure!(
            obj.width == r.width && obj.height == r.height,
            "replayed cutout size differs from the record"
        );
        stamp_label(&mut label, w, &obj, r.x, r.y, cfg.alpha_threshold);
    }
    ChangeMask::new(h, w, label, MaskKind::GroundTruth)
}
