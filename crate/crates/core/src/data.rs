//! Synthetic cross-color person dataset.
//!
//! Each identity is a stick-figure silhouette (head, torso, legs) with its
//! own proportions, skin tone and a fixed speckle pattern on the torso. The
//! clothing colors are drawn near one luminance level, so in RGB they are a
//! strong but unreliable cue while infrared renders (luminance plus noise)
//! keep only the geometry and the speckle. In the cloth-change regime each
//! identity owns several clothing sets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color_aug::{load_png, save_png, Image, Modality, LUMA};
use crate::error::{Error, Result};
use crate::eval::{cmc_map_with, chance_rank1, relevance, Direction, ItemMeta, Relevance};
use crate::numerics::Tensor;

pub const CANVAS_H: usize = 64;
pub const CANVAS_W: usize = 32;
/// Torso speckle grid (rows x columns).
pub const TEXTURE_GRID: (usize, usize) = (4, 3);
const TEXTURE_LEVELS: [f32; 3] = [0.55, 1.0, 1.45];
const CLOTH_LUMA: f32 = 0.5;
const IR_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Visible-infrared: one clothing set, both modalities.
    Vi,
    /// Cloth-change: RGB only, several clothing sets.
    Cc,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Vi => "vi",
            Regime::Cc => "cc",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vi" => Ok(Regime::Vi),
            "cc" => Ok(Regime::Cc),
            other => Err(Error::invalid("Regime", format!("unknown regime `{other}` (vi, cc)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("Split", format!("unknown split `{other}` (train, test)"))),
        }
    }
}

/// Appearance of one synthetic person. Lengths are in pixels at scale 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: usize,
    pub head_radius: f32,
    pub torso_width: f32,
    pub torso_height: f32,
    pub leg_width: f32,
    pub skin_tone: f32,
    pub texture_seed: u64,
    /// `(torso, legs)` colors per clothing set.
    pub base_cloth_colors: Vec<([f32; 3], [f32; 3])>,
}

/// Body height in unscaled pixels, head top to feet.
const BODY_HEIGHT: f32 = 56.0;

fn cloth_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    // a random chroma direction with zero luminance, added to mid gray
    loop {
        let d: [f32; 3] = std::array::from_fn(|_| rng.random_range(-1.0f32..1.0));
        let l: f32 = d.iter().zip(LUMA).map(|(a, b)| a * b).sum();
        let d = [d[0] - l, d[1] - l, d[2] - l];
        let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm < 0.2 {
            continue;
        }
        let amp = rng.random_range(0.25..0.45);
        return d.map(|v| (CLOTH_LUMA + amp * v / norm).clamp(0.0, 1.0));
    }
}

impl IdentitySpec {
    pub fn random<R: Rng + ?Sized>(id: usize, clothing_sets: usize, rng: &mut R) -> Self {
        let head_radius = rng.random_range(4.0..6.0);
        let torso_width: f32 = rng.random_range(12.0..20.0);
        let torso_height = rng.random_range(18.0..24.0);
        let leg_width = rng.random_range(3.0..(torso_width / 2.0 - 1.0).min(6.0));
        Self {
            id,
            head_radius,
            torso_width,
            torso_height,
            leg_width,
            skin_tone: rng.random_range(0.3..0.8),
            texture_seed: rng.random(),
            base_cloth_colors: (0..clothing_sets).map(|_| (cloth_color(rng), cloth_color(rng))).collect(),
        }
    }

    /// Multiplicative brightness of each torso cell, row-major.
    pub fn texture(&self) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        (0..TEXTURE_GRID.0 * TEXTURE_GRID.1).map(|_| *TEXTURE_LEVELS.choose(&mut rng).expect("nonempty")).collect()
    }

    fn validate(&self) -> Result<()> {
        let fits = 2.0 * self.head_radius + self.torso_height < BODY_HEIGHT - 8.0
            && self.torso_width * 1.1 + 6.0 <= CANVAS_W as f32
            && 2.0 * (1.0 + self.leg_width) <= self.torso_width;
        if fits {
            Ok(())
        } else {
            Err(Error::invalid("IdentitySpec", format!("identity {} does not fit the canvas", self.id)))
        }
    }
}

/// Placement of the body for one camera view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewJitter {
    pub dx: f32,
    pub scale: f32,
}

/// Per-view jitter: horizontal offset and scale within 10%.
pub fn view_jitter(spec: &IdentitySpec, view: usize) -> ViewJitter {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.texture_seed, view as u64, 0x71e3]));
    ViewJitter {
        dx: rng.random_range(-0.1..=0.1) * CANVAS_W as f32,
        scale: rng.random_range(0.9..=1.1),
    }
}

/// Per-view background color.
pub fn view_background(view: usize) -> [f32; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[view as u64, 0xb9]));
    std::array::from_fn(|_| rng.random_range(0.1..0.9))
}

/// Per-image variation drawn from the sample's generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShotJitter {
    pub dx: i32,
    pub dy: i32,
    pub gain: f32,
}

impl ShotJitter {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { dx: rng.random_range(-1..=1), dy: rng.random_range(-2..=2), gain: rng.random_range(0.85..1.15) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Background,
    Skin,
    /// Torso clothing, with its speckle cell index.
    Torso(usize),
    Legs,
}

/// Semantic label of every pixel, row-major `H x W`.
pub fn region_map(spec: &IdentitySpec, view: usize, shot: ShotJitter) -> Vec<Region> {
    let vj = view_jitter(spec, view);
    let s = vj.scale;
    let cx = CANVAS_W as f32 / 2.0 + vj.dx + shot.dx as f32;
    let top = (CANVAS_H as f32 - BODY_HEIGHT * s) / 2.0 + shot.dy as f32;
    let r = spec.head_radius;
    let torso_top = 2.0 * r + 1.0;
    let torso_bot = torso_top + spec.torso_height;
    let (rows, cols) = TEXTURE_GRID;
    let mut out = vec![Region::Background; CANVAS_H * CANVAS_W];
    for y in 0..CANVAS_H {
        for x in 0..CANVAS_W {
            let u = (x as f32 + 0.5 - cx) / s;
            let v = (y as f32 + 0.5 - top) / s;
            let region = if u * u + (v - r) * (v - r) <= r * r || (u.abs() <= 1.5 && (2.0 * r..torso_top).contains(&v)) {
                Region::Skin
            } else if u.abs() <= spec.torso_width / 2.0 && (torso_top..torso_bot).contains(&v) {
                let cu = (((u + spec.torso_width / 2.0) / spec.torso_width) * cols as f32) as usize;
                let cv = (((v - torso_top) / spec.torso_height) * rows as f32) as usize;
                Region::Torso(cv.min(rows - 1) * cols + cu.min(cols - 1))
            } else if (torso_bot..BODY_HEIGHT).contains(&v) && (1.0..=1.0 + spec.leg_width).contains(&u.abs()) {
                Region::Legs
            } else {
                Region::Background
            };
            out[y * CANVAS_W + x] = region;
        }
    }
    out
}

/// Draw one image. The shot jitter is taken from `rng` first, then the
/// infrared noise, so two renders that differ only in `clothing` from equal
/// generator states differ only on clothing pixels.
pub fn render_sample<R: Rng + ?Sized>(
    spec: &IdentitySpec,
    view: usize,
    clothing: usize,
    modality: Modality,
    rng: &mut R,
) -> Result<Image> {
    let Some(&(torso, legs)) = spec.base_cloth_colors.get(clothing) else {
        return Err(Error::invalid(
            "render_sample",
            format!("clothing {clothing} out of range for identity {} ({} sets)", spec.id, spec.base_cloth_colors.len()),
        ));
    };
    let shot = ShotJitter::draw(rng);
    let regions = region_map(spec, view, shot);
    let tex = spec.texture();
    let bg = view_background(view);
    let skin = [spec.skin_tone, spec.skin_tone * 0.85, spec.skin_tone * 0.7];
    let plane = CANVAS_H * CANVAS_W;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, region) in regions.iter().enumerate() {
        let color = match *region {
            Region::Background => bg,
            Region::Skin => skin.map(|v| v * shot.gain),
            Region::Torso(cell) => torso.map(|v| v * tex[cell] * shot.gain),
            Region::Legs => legs.map(|v| v * shot.gain),
        };
        for c in 0..3 {
            data[c * plane + i] = color[c].clamp(0.0, 1.0);
        }
    }
    if modality == Modality::Ir {
        let noise = Normal::new(0.0, IR_NOISE).expect("valid sigma");
        for i in 0..plane {
            let lum: f32 = (0..3).map(|c| LUMA[c] * data[c * plane + i]).sum();
            let v = (lum + noise.sample(rng) as f32).clamp(0.0, 1.0);
            for c in 0..3 {
                data[c * plane + i] = v;
            }
        }
    }
    Image::new(Tensor::new([3, CANVAS_H, CANVAS_W], data)?, modality, spec.id, view, clothing)
}

/// splitmix64 over a list of words.
fn mix(words: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    pub views: usize,
    /// Defaults to 1 for VI and 3 for CC.
    pub clothing_sets: Option<usize>,
    pub images_per_cell: usize,
    pub regime: Regime,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train_ids: 32, n_test_ids: 16, views: 4, clothing_sets: None, images_per_cell: 4, regime: Regime::Vi, seed: 0 }
    }
}

impl DataConfig {
    pub fn for_regime(regime: Regime) -> Self {
        Self { regime, ..Self::default() }
    }

    /// Copy with every optional field filled in.
    pub fn resolved(&self) -> Self {
        let sets = self.clothing_sets.unwrap_or(match self.regime {
            Regime::Vi => 1,
            Regime::Cc => 3,
        });
        Self { clothing_sets: Some(sets), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        let sets = c.clothing_sets.unwrap_or(1);
        let bad = |m: String| Err(Error::Config(m));
        if c.n_train_ids < 2 || c.n_test_ids < 2 {
            return bad(format!("need at least 2 identities per split (train {}, test {})", c.n_train_ids, c.n_test_ids));
        }
        if c.views < 2 {
            return bad(format!("need at least 2 views, got {}", c.views));
        }
        if c.images_per_cell == 0 || sets == 0 {
            return bad("images_per_cell and clothing_sets must be positive".into());
        }
        if c.regime == Regime::Cc && sets < 2 {
            return bad(format!("cloth-change regime needs at least 2 clothing sets, got {sets}"));
        }
        Ok(())
    }

    fn modalities(&self) -> &'static [Modality] {
        match self.regime {
            Regime::Vi => &[Modality::Rgb, Modality::Ir],
            Regime::Cc => &[Modality::Rgb],
        }
    }

    /// Images per split, `(train, test)`.
    pub fn image_counts(&self) -> (usize, usize) {
        let c = self.resolved();
        let per_id = c.views * c.modalities().len() * c.clothing_sets.unwrap_or(1) * c.images_per_cell;
        (c.n_train_ids * per_id, c.n_test_ids * per_id)
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub identity: usize,
    pub modality: Modality,
    pub view: usize,
    pub clothing: usize,
}

impl ManifestRow {
    pub fn meta(&self) -> ItemMeta {
        ItemMeta { identity: self.identity, modality: self.modality, view: self.view, clothing: self.clothing }
    }
}

/// Header of every manifest CSV.
pub const MANIFEST_HEADER: [&str; 5] = ["path", "identity", "modality", "view", "clothing"];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub regime: Regime,
    pub rows: Vec<ManifestRow>,
    /// `key: value` lines written as `#` comments above the header.
    pub notes: Vec<(String, String)>,
}

impl DatasetManifest {
    pub fn file_name(split: Split) -> String {
        format!("{split}.csv")
    }

    pub fn metas(&self) -> Vec<ItemMeta> {
        self.rows.iter().map(ManifestRow::meta).collect()
    }

    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.rows.iter().map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Per-regime coverage requirements.
    pub fn check_invariants(&self) -> Result<()> {
        let mut per_id: BTreeMap<usize, (usize, usize, std::collections::BTreeSet<usize>)> = BTreeMap::new();
        for r in &self.rows {
            let e = per_id.entry(r.identity).or_default();
            match r.modality {
                Modality::Rgb => e.0 += 1,
                Modality::Ir => e.1 += 1,
            }
            e.2.insert(r.clothing);
        }
        for (id, (rgb, ir, sets)) in per_id {
            let ok = match self.regime {
                Regime::Vi => rgb >= 2 && ir >= 2,
                Regime::Cc => self.split == Split::Train || sets.len() >= 2,
            };
            if !ok {
                return Err(Error::invalid(
                    "DatasetManifest",
                    format!("identity {id}: {rgb} rgb, {ir} ir, {} clothing sets", sets.len()),
                ));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut head = format!("# split: {}\n# regime: {}\n", self.split, self.regime.as_str());
        for (k, v) in &self.notes {
            head.push_str(&format!("# {k}: {v}\n"));
        }
        file.write_all(head.as_bytes()).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut notes = Vec::new();
        let (mut split, mut regime) = (None, None);
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some((k, v)) = line.trim_start_matches('#').trim().split_once(':') {
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "split" => split = Some(if v == "test" { Split::Test } else { Split::Train }),
                    "regime" => regime = Some(v.parse::<Regime>()?),
                    _ => notes.push((k.to_string(), v.to_string())),
                }
            }
        }
        let bad = |m: &str| Error::Config(format!("{}: {m}", path.display()));
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        if r.headers()?.iter().ne(MANIFEST_HEADER) {
            return Err(bad(&format!("expected header {}", MANIFEST_HEADER.join(","))));
        }
        let rows = r.deserialize().collect::<Result<Vec<ManifestRow>, _>>()?;
        Ok(Self {
            split: split.ok_or_else(|| bad("missing `# split:` line"))?,
            regime: regime.ok_or_else(|| bad("missing `# regime:` line"))?,
            rows,
            notes,
        })
    }

    pub fn note(&self, key: &str) -> Option<&str> {
        self.notes.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// A split held in memory: manifest rows and their images, index-aligned.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Load one split of a dataset directory.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let manifest = DatasetManifest::read(&dir.join(DatasetManifest::file_name(split)))?;
        let images = manifest
            .rows
            .iter()
            .map(|r| Image::new(load_png(&dir.join(&r.path))?, r.modality, r.identity, r.view, r.clothing))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }
}

/// Train and test splits rendered in memory.
pub fn generate(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let sets = cfg.clothing_sets.unwrap_or(1);
    let mut id_rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 0x1d]));
    let specs: Vec<IdentitySpec> =
        (0..cfg.n_train_ids + cfg.n_test_ids).map(|id| IdentitySpec::random(id, sets, &mut id_rng)).collect();
    for s in &specs {
        s.validate()?;
    }
    let render_split = |split: Split, ids: &[IdentitySpec]| -> Result<Dataset> {
        let mut rows = Vec::new();
        let mut images = Vec::new();
        for spec in ids {
            for &m in cfg.modalities() {
                for view in 0..cfg.views {
                    for clothing in 0..sets {
                        for k in 0..cfg.images_per_cell {
                            let seed = mix(&[cfg.seed, spec.id as u64, view as u64, clothing as u64, m as u64, k as u64]);
                            let img = render_sample(spec, view, clothing, m, &mut ChaCha8Rng::seed_from_u64(seed))?;
                            rows.push(ManifestRow {
                                path: format!("{split}/{}/{:04}_v{view}_c{clothing}_{k}.png", m.as_str(), spec.id),
                                identity: spec.id,
                                modality: m,
                                view,
                                clothing,
                            });
                            images.push(img);
                        }
                    }
                }
            }
        }
        let manifest = DatasetManifest { split, regime: cfg.regime, rows, notes: Vec::new() };
        manifest.check_invariants()?;
        Ok(Dataset { manifest, images })
    };
    let mut train = render_split(Split::Train, &specs[..cfg.n_train_ids])?;
    let mut test = render_split(Split::Test, &specs[cfg.n_train_ids..])?;
    let mut notes = vec![("config".to_string(), serde_json::to_string(&cfg)?)];
    for (k, v) in signal_stats(&test)? {
        notes.push((k, format!("{v:.4}")));
    }
    train.manifest.notes = notes.clone();
    test.manifest.notes = notes;
    Ok((train, test))
}

/// Generate a dataset and write PNGs plus `train.csv` / `test.csv` to `dir`.
pub fn make_dataset(cfg: &DataConfig, dir: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, test) = generate(cfg)?;
    for ds in [&train, &test] {
        for (row, img) in ds.manifest.rows.iter().zip(&ds.images) {
            let path = dir.join(&row.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_png(&img.pixels, &path)?;
        }
        ds.manifest.write(&dir.join(DatasetManifest::file_name(ds.manifest.split)))?;
    }
    Ok((train.manifest, test.manifest))
}

fn flat_pixels(images: &[&Image], gray: bool) -> Tensor<f64> {
    let d = if gray { CANVAS_H * CANVAS_W } else { 3 * CANVAS_H * CANVAS_W };
    let mut out = Vec::with_capacity(images.len() * d);
    for img in images {
        if gray {
            out.extend(crate::color_aug::luminance(img).iter().map(|&v| v as f64));
        } else {
            out.extend(img.pixels.data().iter().map(|&v| v as f64));
        }
    }
    Tensor::new([images.len(), d], out).expect("consistent sizes")
}

/// Nearest-neighbour Rank-1 on raw pixels of the test split, plus chance.
pub fn signal_stats(test: &Dataset) -> Result<Vec<(String, f64)>> {
    let metas = test.manifest.metas();
    let pick = |f: &dyn Fn(&ItemMeta) -> bool| -> (Vec<&Image>, Vec<ItemMeta>) {
        let idx: Vec<usize> = (0..metas.len()).filter(|&i| f(&metas[i])).collect();
        (idx.iter().map(|&i| &test.images[i]).collect(), idx.iter().map(|&i| metas[i]).collect())
    };
    let mut out = Vec::new();
    match test.manifest.regime {
        Regime::Vi => {
            let (qi, qm) = pick(&|m| m.modality == Modality::Ir);
            let (gi, gm) = pick(&|m| m.modality == Modality::Rgb);
            let dir = Direction::NirToRgb;
            let gray = cmc_map_with(dir, &flat_pixels(&qi, true), &qm, &flat_pixels(&gi, true), &gm, |q, g| relevance(dir, q, g))?;
            out.push(("gray_nn_rank1_nir_rgb".to_string(), gray.rank1()));
            out.push(("chance_rank1_nir_rgb".to_string(), chance_rank1(dir, &qm, &gm)));
        }
        Regime::Cc => {
            let (im, mm) = pick(&|_| true);
            let dir = Direction::ClothChange;
            let (gray, rgb) = (flat_pixels(&im, true), flat_pixels(&im, false));
            let rule = |q: &ItemMeta, g: &ItemMeta| relevance(dir, q, g);
            let same = |q: &ItemMeta, g: &ItemMeta| match relevance(Direction::NirToRgb, q, g) {
                Relevance::Relevant if q.clothing != g.clothing => Relevance::Excluded,
                r => r,
            };
            out.push(("gray_nn_rank1_cc".to_string(), cmc_map_with(dir, &gray, &mm, &gray, &mm, rule)?.rank1()));
            out.push(("rgb_nn_rank1_cc".to_string(), cmc_map_with(dir, &rgb, &mm, &rgb, &mm, rule)?.rank1()));
            out.push(("rgb_nn_rank1_same_clothes".to_string(), cmc_map_with(dir, &rgb, &mm, &rgb, &mm, same)?.rank1()));
            out.push(("chance_rank1_cc".to_string(), chance_rank1(dir, &mm, &mm)));
        }
    }
    Ok(out)
}

/// One PK mini-batch. Labels are contiguous training indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rgb: Vec<Image>,
    pub rgb_labels: Vec<usize>,
    /// Empty in the cloth-change regime.
    pub ir: Vec<Image>,
    pub ir_labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rgb.len() + self.ir.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default, Clone, Debug)]
struct Pool {
    rgb: Vec<usize>,
    ir: Vec<usize>,
}

/// Identity-balanced sampler over a training split.
#[derive(Clone, Debug)]
pub struct PkSampler<'a> {
    data: &'a Dataset,
    pools: BTreeMap<usize, Pool>,
    ids: Vec<usize>,
}

impl<'a> PkSampler<'a> {
    pub fn new(data: &'a Dataset) -> Result<Self> {
        let mut pools: BTreeMap<usize, Pool> = BTreeMap::new();
        for (i, r) in data.manifest.rows.iter().enumerate() {
            let p = pools.entry(r.identity).or_default();
            match r.modality {
                Modality::Rgb => p.rgb.push(i),
                Modality::Ir => p.ir.push(i),
            }
        }
        let ids: Vec<usize> = pools.keys().copied().collect();
        if ids.len() < 2 {
            return Err(Error::invalid("PkSampler", "need at least two identities"));
        }
        Ok(Self { data, pools, ids })
    }

    /// Number of classes, i.e. the classifier width.
    pub fn num_classes(&self) -> usize {
        self.ids.len()
    }

    /// Contiguous label of a dataset identity.
    pub fn label_of(&self, identity: usize) -> Option<usize> {
        self.ids.binary_search(&identity).ok()
    }

    fn draw<R: Rng + ?Sized>(pool: &[usize], k: usize, what: &str, id: usize, rng: &mut R) -> Result<Vec<usize>> {
        if pool.is_empty() {
            return Err(Error::invalid("sample_batch", format!("identity {id} has no {what} images")));
        }
        if pool.len() >= k {
            return Ok(pool.choose_multiple(rng, k).copied().collect());
        }
        log::warn!("identity {id}: {} {what} images for K = {k}; resampling with replacement", pool.len());
        Ok((0..k).map(|_| *pool.choose(rng).expect("nonempty")).collect())
    }

    /// `P` distinct identities with `K` images each per modality. In the
    /// cloth-change regime the `K` images of an identity cover at least two
    /// clothing sets.
    pub fn sample_batch<R: Rng + ?Sized>(&self, p: usize, k: usize, rng: &mut R) -> Result<Batch> {
        if p < 2 || k == 0 {
            return Err(Error::invalid("sample_batch", format!("need P >= 2 and K >= 1, got P = {p}, K = {k}")));
        }
        if p > self.ids.len() {
            return Err(Error::invalid("sample_batch", format!("P = {p} exceeds {} identities", self.ids.len())));
        }
        let regime = self.data.manifest.regime;
        let chosen: Vec<usize> = self.ids.choose_multiple(rng, p).copied().collect();
        let mut batch = Batch { rgb: Vec::new(), rgb_labels: Vec::new(), ir: Vec::new(), ir_labels: Vec::new() };
        for id in chosen {
            let pool = &self.pools[&id];
            let label = self.label_of(id).expect("known identity");
            let rgb = match regime {
                Regime::Vi => Self::draw(&pool.rgb, k, "rgb", id, rng)?,
                Regime::Cc => self.draw_cloth_change(pool, k, id, rng)?,
            };
            for i in rgb {
                batch.rgb.push(self.data.images[i].clone());
                batch.rgb_labels.push(label);
            }
            if regime == Regime::Vi {
                for i in Self::draw(&pool.ir, k, "ir", id, rng)? {
                    batch.ir.push(self.data.images[i].clone());
                    batch.ir_labels.push(label);
                }
            }
        }
        Ok(batch)
    }

    fn draw_cloth_change<R: Rng + ?Sized>(&self, pool: &Pool, k: usize, id: usize, rng: &mut R) -> Result<Vec<usize>> {
        let mut by_set: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &pool.rgb {
            by_set.entry(self.data.manifest.rows[i].clothing).or_default().push(i);
        }
        if by_set.len() < 2 || k < 2 {
            return Err(Error::invalid(
                "sample_batch",
                format!("identity {id}: cloth-change batches need K >= 2 and two clothing sets (K = {k}, {} sets)", by_set.len()),
            ));
        }
        let mut sets: Vec<&Vec<usize>> = by_set.values().collect();
        sets.shuffle(rng);
        let mut out = vec![*sets[0].choose(rng).expect("nonempty"), *sets[1].choose(rng).expect("nonempty")];
        let rest: Vec<usize> = pool.rgb.iter().copied().filter(|i| !out.contains(i)).collect();
        out.extend(Self::draw(&rest, k - 2, "rgb", id, rng)?);
        Ok(out)
    }
}

/// Directory layout check used by the CLI before generating.
pub fn dir_is_empty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Path of a split's manifest inside a dataset directory.
pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(DatasetManifest::file_name(split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sets: usize) -> IdentitySpec {
        IdentitySpec::random(7, sets, &mut ChaCha8Rng::seed_from_u64(11))
    }

    fn small(regime: Regime) -> DataConfig {
        DataConfig { n_train_ids: 4, n_test_ids: 3, views: 2, images_per_cell: 2, regime, ..DataConfig::default() }
    }

    #[test]
    fn render_is_deterministic() {
        let s = spec(1);
        let a = render_sample(&s, 1, 0, Modality::Ir, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = render_sample(&s, 1, 0, Modality::Ir, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(render_sample(&s, 1, 1, Modality::Rgb, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn ir_channels_identical() {
        let img = render_sample(&spec(1), 0, 0, Modality::Ir, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(img.channel(0), img.channel(1));
        assert_eq!(img.channel(1), img.channel(2));
        assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn clothing_sets_differ_only_on_clothing() {
        let s = spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shot = ShotJitter::draw(&mut rng.clone());
        let regions = region_map(&s, 2, shot);
        let a = render_sample(&s, 2, 0, Modality::Rgb, &mut rng.clone()).unwrap();
        let b = render_sample(&s, 2, 1, Modality::Rgb, &mut rng).unwrap();
        let plane = CANVAS_H * CANVAS_W;
        let mut differing = 0;
        for i in 0..plane {
            let same = (0..3).all(|c| a.pixels.data()[c * plane + i] == b.pixels.data()[c * plane + i]);
            let clothing = matches!(regions[i], Region::Torso(_) | Region::Legs);
            if !same {
                differing += 1;
                assert!(clothing, "pixel {i} differs outside clothing ({:?})", regions[i]);
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn every_texture_cell_is_visible() {
        let s = spec(1);
        let shot = ShotJitter { dx: 0, dy: 0, gain: 1.0 };
        for view in 0..4 {
            let regions = region_map(&s, view, shot);
            for cell in 0..TEXTURE_GRID.0 * TEXTURE_GRID.1 {
                assert!(regions.contains(&Region::Torso(cell)), "view {view} cell {cell}");
            }
            assert!(regions.contains(&Region::Legs) && regions.contains(&Region::Skin));
        }
    }

    #[test]
    fn cloth_colors_are_near_one_luminance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let c = cloth_color(&mut rng);
            let l: f32 = c.iter().zip(LUMA).map(|(a, b)| a * b).sum();
            assert!((l - CLOTH_LUMA).abs() < 0.1, "{c:?}");
        }
    }

    #[test]
    fn default_counts() {
        assert_eq!(DataConfig::default().image_counts().0, 32 * 4 * 2 * 4);
        assert_eq!(DataConfig::for_regime(Regime::Cc).image_counts().0, 32 * 4 * 3 * 4);
        let bad = DataConfig { n_train_ids: 1, ..DataConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn generated_manifests_hold_invariants() {
        for regime in [Regime::Vi, Regime::Cc] {
            let (train, test) = generate(&small(regime)).unwrap();
            train.manifest.check_invariants().unwrap();
            test.manifest.check_invariants().unwrap();
            let (a, b) = (train.manifest.identities(), test.manifest.identities());
            assert!(a.iter().all(|i| !b.contains(i)));
            assert_eq!(train.len(), small(regime).image_counts().0);
        }
    }

    #[test]
    fn disk_round_trip_is_exact_and_seeded() {
        let cfg = small(Regime::Cc);
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (m1, _) = make_dataset(&cfg, d1.path()).unwrap();
        make_dataset(&cfg, d2.path()).unwrap();
        let f1 = fs::read(manifest_path(d1.path(), Split::Train)).unwrap();
        assert_eq!(f1, fs::read(manifest_path(d2.path(), Split::Train)).unwrap());
        assert_eq!(fs::read(d1.path().join(&m1.rows[3].path)).unwrap(), fs::read(d2.path().join(&m1.rows[3].path)).unwrap());
        let loaded = Dataset::load(d1.path(), Split::Train).unwrap();
        assert_eq!(loaded.manifest.rows, m1.rows);
        assert_eq!(loaded.manifest.regime, Regime::Cc);
        assert!(loaded.manifest.note("rgb_nn_rank1_cc").is_some());
        assert!(!dir_is_empty(d1.path()).unwrap());
    }

    #[test]
    fn pk_batch_structure() {
        let (train, _) = generate(&small(Regime::Vi)).unwrap();
        let s = PkSampler::new(&train).unwrap();
        let b = s.sample_batch(2, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((b.rgb.len(), b.ir.len()), (4, 4));
        assert!(b.rgb.iter().all(|i| i.modality == Modality::Rgb) && b.ir.iter().all(|i| i.modality == Modality::Ir));
        for (img, &l) in b.rgb.iter().zip(&b.rgb_labels) {
            assert_eq!(s.label_of(img.identity), Some(l));
        }
        assert!(s.sample_batch(5, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn cloth_change_batch_spans_two_sets() {
        let (train, _) = generate(&small(Regime::Cc)).unwrap();
        let s = PkSampler::new(&train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let b = s.sample_batch(2, 3, &mut rng).unwrap();
            assert!(b.ir.is_empty());
            for l in 0..s.num_classes() {
                let sets: std::collections::BTreeSet<usize> =
                    b.rgb.iter().zip(&b.rgb_labels).filter(|(_, &x)| x == l).map(|(i, _)| i.clothing).collect();
                assert!(sets.is_empty() || sets.len() >= 2);
            }
        }
    }

    #[test]
    fn oversized_k_resamples() {
        let (train, _) = generate(&small(Regime::Vi)).unwrap();
        let s = PkSampler::new(&train).unwrap();
        let b = s.sample_batch(2, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.rgb.len(), 20);
    }
}
