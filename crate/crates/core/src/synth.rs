//! Procedural 32x32 scenes with independent layout / content / material
//! factors, plus exact rule-based oracles for each factor.
//!
//! Geometry: the image splits into four 16x16 quadrants. One object of
//! diameter 10±2 px sits at its quadrant center (7.5, 7.5 locally) jittered
//! by ±2 px; these bounds keep every object fully inside its quadrant over
//! the whole jitter grid. Background is -0.8; the object is +0.8, textured
//! materials modulate it down to +0.4 so the >0 threshold never moves.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::spectral::dft2;
use crate::tensor::Tensor;

pub const IMG: usize = 32;
const QUAD: usize = 16;
const BG: f32 = -0.8;
const FG_HI: f32 = 0.8;
const FG_LO: f32 = 0.4;
pub const JITTER_MAX: i64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    TL,
    TR,
    BL,
    BR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Content {
    Circle,
    Square,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Material {
    Solid,
    HStripe,
    VStripe,
    Checker,
}

impl Layout {
    pub const ALL: [Layout; 4] = [Layout::TL, Layout::TR, Layout::BL, Layout::BR];

    pub fn as_str(&self) -> &'static str {
        match self {
            Layout::TL => "TL",
            Layout::TR => "TR",
            Layout::BL => "BL",
            Layout::BR => "BR",
        }
    }

    pub fn parse(s: &str) -> Result<Layout> {
        Layout::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel { field: "layout", value: s.into() })
    }

    pub fn index(&self) -> usize {
        Layout::ALL.iter().position(|l| l == self).unwrap()
    }

    /// (row, col) origin of this quadrant.
    fn origin(&self) -> (usize, usize) {
        match self {
            Layout::TL => (0, 0),
            Layout::TR => (0, QUAD),
            Layout::BL => (QUAD, 0),
            Layout::BR => (QUAD, QUAD),
        }
    }
}

impl Content {
    pub const ALL: [Content; 3] = [Content::Circle, Content::Square, Content::Cross];

    pub fn as_str(&self) -> &'static str {
        match self {
            Content::Circle => "circle",
            Content::Square => "square",
            Content::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Content> {
        Content::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel { field: "content", value: s.into() })
    }

    pub fn index(&self) -> usize {
        Content::ALL.iter().position(|c| c == self).unwrap()
    }
}

impl Material {
    pub const ALL: [Material; 4] =
        [Material::Solid, Material::HStripe, Material::VStripe, Material::Checker];

    pub fn as_str(&self) -> &'static str {
        match self {
            Material::Solid => "solid",
            Material::HStripe => "hstripe",
            Material::VStripe => "vstripe",
            Material::Checker => "checker",
        }
    }

    pub fn parse(s: &str) -> Result<Material> {
        Material::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel { field: "material", value: s.into() })
    }

    pub fn index(&self) -> usize {
        Material::ALL.iter().position(|m| m == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributeLabel {
    pub layout: Layout,
    pub content: Content,
    pub material: Material,
}

pub const COMBO_COUNT: usize = 48;

impl AttributeLabel {
    pub fn new(layout: Layout, content: Content, material: Material) -> Self {
        Self { layout, content, material }
    }

    /// Canonical index in 0..48 (layout-major, then content, then material).
    pub fn index(&self) -> usize {
        (self.layout.index() * Content::ALL.len() + self.content.index()) * Material::ALL.len()
            + self.material.index()
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < COMBO_COUNT);
        let material = Material::ALL[i % 4];
        let content = Content::ALL[(i / 4) % 3];
        let layout = Layout::ALL[i / 12];
        Self { layout, content, material }
    }

    pub fn all() -> impl Iterator<Item = AttributeLabel> {
        (0..COMBO_COUNT).map(AttributeLabel::from_index)
    }

    /// Parse `layout=TL,content=circle,material=checker` (any key order,
    /// all three keys required).
    pub fn parse_kv(s: &str) -> Result<AttributeLabel> {
        let mut layout = None;
        let mut content = None;
        let mut material = None;
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value in label, got `{part}`")))?;
            match k.trim() {
                "layout" => layout = Some(Layout::parse(v.trim())?),
                "content" => content = Some(Content::parse(v.trim())?),
                "material" => material = Some(Material::parse(v.trim())?),
                other => {
                    return Err(Error::UnknownLabel { field: "label key", value: other.into() })
                }
            }
        }
        match (layout, content, material) {
            (Some(l), Some(c), Some(m)) => Ok(AttributeLabel::new(l, c, m)),
            _ => Err(Error::invalid("label needs layout, content, and material")),
        }
    }
}

impl fmt::Display for AttributeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layout={},content={},material={}",
            self.layout.as_str(),
            self.content.as_str(),
            self.material.as_str()
        )
    }
}

/// A fully determined scene: label plus the jitter actually applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSpec {
    pub label: AttributeLabel,
    pub jitter_seed: u64,
    pub dx: i64,
    pub dy: i64,
    pub size_jitter: i64,
}

const JITTER_STREAM: u64 = 0x4A49_5454; // "JITT"

impl SceneSpec {
    /// No jitter at all.
    pub fn clean(label: AttributeLabel) -> Self {
        Self { label, jitter_seed: 0, dx: 0, dy: 0, size_jitter: 0 }
    }

    /// Jitter drawn deterministically from `jitter_seed`.
    pub fn from_seed(label: AttributeLabel, jitter_seed: u64) -> Self {
        let mut rng = RngStream::new(jitter_seed, JITTER_STREAM);
        let dx = rng.next_range_inclusive(-JITTER_MAX, JITTER_MAX);
        let dy = rng.next_range_inclusive(-JITTER_MAX, JITTER_MAX);
        let size_jitter = rng.next_range_inclusive(-JITTER_MAX, JITTER_MAX);
        Self { label, jitter_seed, dx, dy, size_jitter }
    }

    /// Explicit jitter (used by the exhaustive grid sweeps).
    pub fn with_jitter(label: AttributeLabel, dx: i64, dy: i64, size_jitter: i64) -> Result<Self> {
        for v in [dx, dy, size_jitter] {
            if v.abs() > JITTER_MAX {
                return Err(Error::invalid(format!("jitter {v} exceeds +-{JITTER_MAX}")));
            }
        }
        Ok(Self { label, jitter_seed: 0, dx, dy, size_jitter })
    }
}

/// 16x16 object mask as a 256-bit set (bit = ly*16 + lx).
type QuadMask = [u64; 4];

fn mask_set(m: &mut QuadMask, ly: usize, lx: usize) {
    let bit = ly * QUAD + lx;
    m[bit / 64] |= 1 << (bit % 64);
}

fn mask_iou(a: &QuadMask, b: &QuadMask) -> f64 {
    let mut inter = 0u32;
    let mut union = 0u32;
    for i in 0..4 {
        inter += (a[i] & b[i]).count_ones();
        union += (a[i] | b[i]).count_ones();
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Quadrant-local object mask for a content shape at the given jitter.
fn shape_mask(content: Content, dx: i64, dy: i64, size_jitter: i64) -> QuadMask {
    let h = (10 + size_jitter) as f64 / 2.0; // half of the object diameter
    let cx = 7.5 + dx as f64;
    let cy = 7.5 + dy as f64;
    let half = h - 0.5;
    let mut m = [0u64; 4];
    for ly in 0..QUAD {
        for lx in 0..QUAD {
            let rx = lx as f64 - cx;
            let ry = ly as f64 - cy;
            let inside = match content {
                Content::Square => rx.abs() <= half && ry.abs() <= half,
                Content::Circle => rx * rx + ry * ry <= half * half,
                Content::Cross => {
                    (rx.abs() <= 1.5 && ry.abs() <= half) || (ry.abs() <= 1.5 && rx.abs() <= half)
                }
            };
            if inside {
                mask_set(&mut m, ly, lx);
            }
        }
    }
    m
}

/// Texture value at absolute image coordinates (period-4 patterns).
fn texture_value(material: Material, y: usize, x: usize) -> f32 {
    let bright = match material {
        Material::Solid => true,
        Material::HStripe => y % 4 < 2,
        Material::VStripe => x % 4 < 2,
        Material::Checker => (y % 4 < 2) == (x % 4 < 2),
    };
    if bright {
        FG_HI
    } else {
        FG_LO
    }
}

/// Deterministic render of a scene.
pub fn render(spec: &SceneSpec) -> Tensor {
    let mut data = vec![BG; IMG * IMG];
    let (oy, ox) = spec.label.layout.origin();
    let mask = shape_mask(spec.label.content, spec.dx, spec.dy, spec.size_jitter);
    for ly in 0..QUAD {
        for lx in 0..QUAD {
            let bit = ly * QUAD + lx;
            if mask[bit / 64] >> (bit % 64) & 1 == 1 {
                let (y, x) = (oy + ly, ox + lx);
                data[y * IMG + x] = texture_value(spec.label.material, y, x);
            }
        }
    }
    Tensor::new(vec![IMG, IMG], data).expect("render values are finite")
}

fn expect_image(img: &Tensor) -> Result<()> {
    if img.shape() != [IMG, IMG] {
        return Err(Error::ShapeMismatch { expected: vec![IMG, IMG], got: img.shape().to_vec() });
    }
    Ok(())
}

/// Quadrant containing the centroid of above-threshold pixels.
pub fn oracle_layout(img: &Tensor) -> Result<Layout> {
    expect_image(img)?;
    let mut n = 0u64;
    let mut sy = 0f64;
    let mut sx = 0f64;
    for (i, &v) in img.data().iter().enumerate() {
        if v > 0.0 {
            n += 1;
            sy += (i / IMG) as f64;
            sx += (i % IMG) as f64;
        }
    }
    if n == 0 {
        return Err(Error::NoObject);
    }
    let cy = sy / n as f64;
    let cx = sx / n as f64;
    Ok(match (cy < QUAD as f64, cx < QUAD as f64) {
        (true, true) => Layout::TL,
        (true, false) => Layout::TR,
        (false, true) => Layout::BL,
        (false, false) => Layout::BR,
    })
}

/// All jittered templates per content shape, built once.
fn templates() -> &'static Vec<(Content, Vec<QuadMask>)> {
    static TEMPLATES: OnceLock<Vec<(Content, Vec<QuadMask>)>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        Content::ALL
            .into_iter()
            .map(|content| {
                let mut masks = Vec::with_capacity(125);
                for dx in -JITTER_MAX..=JITTER_MAX {
                    for dy in -JITTER_MAX..=JITTER_MAX {
                        for ds in -JITTER_MAX..=JITTER_MAX {
                            masks.push(shape_mask(content, dx, dy, ds));
                        }
                    }
                }
                (content, masks)
            })
            .collect()
    })
}

const CONTENT_IOU_MIN: f64 = 0.6;

/// Best-IoU template match over the jitter grid within the detected quadrant.
pub fn oracle_content(img: &Tensor) -> Result<Content> {
    let layout = oracle_layout(img)?;
    let (oy, ox) = layout.origin();
    let mut observed: QuadMask = [0; 4];
    for ly in 0..QUAD {
        for lx in 0..QUAD {
            if img.data()[(oy + ly) * IMG + ox + lx] > 0.0 {
                mask_set(&mut observed, ly, lx);
            }
        }
    }
    let mut best = (f64::MIN, Content::Circle);
    for (content, masks) in templates() {
        for m in masks {
            let iou = mask_iou(&observed, m);
            if iou > best.0 {
                best = (iou, *content);
            }
        }
    }
    if best.0 < CONTENT_IOU_MIN {
        return Err(Error::UnrecognizedContent);
    }
    Ok(best.1)
}

/// Texture peak bins on the 32-px DFT grid: period-4 stripes land at
/// frequency index 8 on the varying axis, the 2x2-cell checker at (8, 8).
const PEAK_H: [(usize, usize); 2] = [(0, 8), (0, 24)]; // (u, v): varies along y
const PEAK_V: [(usize, usize); 2] = [(8, 0), (24, 0)];
const PEAK_C: [(usize, usize); 4] = [(8, 8), (8, 24), (24, 8), (24, 24)];
const PEAK_FACTOR: f64 = 3.0;

/// Material from the frequency signature of the mean-subtracted object.
pub fn oracle_material(img: &Tensor) -> Result<Material> {
    expect_image(img)?;
    let mut n = 0u64;
    let mut sum = 0f64;
    for &v in img.data() {
        if v > 0.0 {
            n += 1;
            sum += v as f64;
        }
    }
    if n == 0 {
        return Err(Error::NoObject);
    }
    let mean = (sum / n as f64) as f32;
    // object region minus its mean, zero-padded to the full frame
    let field = Tensor::new(
        vec![IMG, IMG],
        img.data().iter().map(|&v| if v > 0.0 { v - mean } else { 0.0 }).collect(),
    )?;
    let spatial_energy: f64 = field.data().iter().map(|&v| (v as f64).powi(2)).sum();
    if spatial_energy <= 1e-9 {
        return Ok(Material::Solid);
    }
    let spec = dft2(&field);
    let band = |bins: &[(usize, usize)]| -> f64 {
        bins.iter().map(|&(u, v)| spec.at(u, v).norm_sqr()).sum::<f64>() / bins.len() as f64
    };
    let e_h = band(&PEAK_H);
    let e_v = band(&PEAK_V);
    let e_c = band(&PEAK_C);
    let peak_total: f64 = PEAK_H
        .iter()
        .chain(&PEAK_V)
        .chain(&PEAK_C)
        .map(|&(u, v)| spec.at(u, v).norm_sqr())
        .sum();
    let total: f64 = spec.data.iter().map(|z| z.norm_sqr()).sum();
    let off_bins = (IMG * IMG - 1 - PEAK_H.len() - PEAK_V.len() - PEAK_C.len()) as f64;
    let off_mean = (total - spec.at(0, 0).norm_sqr() - peak_total) / off_bins;

    let (best_e, best) = [(e_h, Material::HStripe), (e_v, Material::VStripe), (e_c, Material::Checker)]
        .into_iter()
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .unwrap();
    if best_e > PEAK_FACTOR * off_mean {
        Ok(best)
    } else {
        Ok(Material::Solid)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub spec: SceneSpec,
    pub image: Tensor,
}

/// Draw `count` labelled scenes. Uniform mode draws labels uniformly over the
/// 48 combos; stratified mode cycles the combos and requires 48 | count.
pub fn sample_dataset(
    count: usize,
    rng: &mut RngStream,
    stratified: bool,
) -> Result<Vec<DatasetItem>> {
    if count < 1 {
        return Err(Error::invalid("dataset count must be >= 1"));
    }
    if stratified && count % COMBO_COUNT != 0 {
        return Err(Error::invalid(format!(
            "stratified count must be a multiple of {COMBO_COUNT}, got {count}"
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let label = if stratified {
            AttributeLabel::from_index(i % COMBO_COUNT)
        } else {
            AttributeLabel::from_index(rng.next_below(COMBO_COUNT as u64) as usize)
        };
        let jitter_seed = rng.next_u64();
        let spec = SceneSpec::from_seed(label, jitter_seed);
        out.push(DatasetItem { spec, image: render(&spec) });
    }
    Ok(out)
}

/// Write one PGM per item plus `manifest.csv` into `dir`.
pub fn export_dataset(dir: impl AsRef<Path>, items: &[DatasetItem]) -> Result<()> {
    use std::io::Write;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.csv"))?);
    writeln!(manifest, "index,layout,content,material,jitter_seed")?;
    for (i, item) in items.iter().enumerate() {
        let name = format!("img_{i:05}.pgm");
        crate::fileio::pgm::write_pgm(dir.join(&name), &item.image)?;
        writeln!(
            manifest,
            "{i},{},{},{},{}",
            item.spec.label.layout.as_str(),
            item.spec.label.content.as_str(),
            item.spec.label.material.as_str(),
            item.spec.jitter_seed
        )?;
    }
    manifest.flush()?;
    Ok(())
}

/// Read an exported dataset back (images + labels from the manifest).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<DatasetItem>> {
    let dir = dir.as_ref();
    let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
    let mut out = Vec::new();
    for (ln, line) in manifest.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::format("manifest", format!("bad row at line {}", ln + 1)));
        }
        let idx: usize = parts[0]
            .parse()
            .map_err(|_| Error::format("manifest", format!("bad index at line {}", ln + 1)))?;
        let label = AttributeLabel::new(
            Layout::parse(parts[1])?,
            Content::parse(parts[2])?,
            Material::parse(parts[3])?,
        );
        let jitter_seed: u64 = parts[4]
            .parse()
            .map_err(|_| Error::format("manifest", format!("bad seed at line {}", ln + 1)))?;
        let image = crate::fileio::pgm::read_pgm(dir.join(format!("img_{idx:05}.pgm")))?;
        let mut spec = SceneSpec::from_seed(label, jitter_seed);
        spec.label = label;
        out.push(DatasetItem { spec, image });
    }
    if out.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(out)
}

/// Run all three oracles; `Ok` only when all succeed.
pub fn oracle_label(img: &Tensor) -> Result<AttributeLabel> {
    let layout = oracle_layout(img)?;
    let content = oracle_content(img)?;
    let material = oracle_material(img)?;
    Ok(AttributeLabel::new(layout, content, material))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;

    #[test]
    fn clean_square_is_uniform_block() {
        let spec = SceneSpec::clean(AttributeLabel::new(Layout::TL, Content::Square, Material::Solid));
        let img = render(&spec);
        for y in 0..IMG {
            for x in 0..IMG {
                let v = img.data()[y * IMG + x];
                let inside = (3..=12).contains(&y) && (3..=12).contains(&x);
                assert_eq!(v, if inside { FG_HI } else { BG }, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let spec = SceneSpec::from_seed(
            AttributeLabel::new(Layout::BR, Content::Cross, Material::Checker),
            1234,
        );
        assert_eq!(render(&spec).data(), render(&spec).data());
    }

    #[test]
    fn render_values_in_range() {
        for label in AttributeLabel::all() {
            let img = render(&SceneSpec::from_seed(label, 99));
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn oracle_closure_on_clean_renders() {
        for label in AttributeLabel::all() {
            let img = render(&SceneSpec::clean(label));
            assert_eq!(oracle_label(&img).unwrap(), label);
        }
    }

    #[test]
    fn oracle_closure_on_full_jitter_grid() {
        for label in AttributeLabel::all() {
            for dx in -JITTER_MAX..=JITTER_MAX {
                for dy in -JITTER_MAX..=JITTER_MAX {
                    for ds in -JITTER_MAX..=JITTER_MAX {
                        let spec = SceneSpec::with_jitter(label, dx, dy, ds).unwrap();
                        let img = render(&spec);
                        assert_eq!(
                            oracle_label(&img).unwrap(),
                            label,
                            "label {label} jitter ({dx},{dy},{ds})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn blank_image_has_no_object() {
        let img = Tensor::new(vec![IMG, IMG], vec![BG; IMG * IMG]).unwrap();
        assert!(matches!(oracle_layout(&img), Err(Error::NoObject)));
        assert!(matches!(oracle_material(&img), Err(Error::NoObject)));
    }

    #[test]
    fn noise_images_are_unrecognized() {
        let mut errors = 0;
        for i in 0..100 {
            let mut rng = RngStream::new(500 + i, 0);
            let img = gaussian(&mut rng, &[IMG, IMG]).unwrap().clamped(-1.0, 1.0);
            if oracle_content(&img).is_err() {
                errors += 1;
            }
        }
        assert!(errors >= 99, "only {errors}/100 noise images rejected");
    }

    #[test]
    fn factor_independence() {
        let base = SceneSpec::from_seed(
            AttributeLabel::new(Layout::BL, Content::Cross, Material::Solid),
            7,
        );
        let base_img = render(&base);
        for material in Material::ALL {
            let mut spec = base;
            spec.label.material = material;
            let img = render(&spec);
            assert_eq!(oracle_layout(&img).unwrap(), oracle_layout(&base_img).unwrap());
            assert_eq!(oracle_content(&img).unwrap(), oracle_content(&base_img).unwrap());
        }
        for content in Content::ALL {
            let mut spec = base;
            spec.label.content = content;
            let img = render(&spec);
            assert_eq!(oracle_layout(&img).unwrap(), oracle_layout(&base_img).unwrap());
            assert_eq!(oracle_material(&img).unwrap(), oracle_material(&base_img).unwrap());
        }
    }

    #[test]
    fn stratified_dataset_is_exact() {
        let mut rng = RngStream::new(42, 0);
        let items = sample_dataset(96, &mut rng, true).unwrap();
        let mut counts = [0usize; COMBO_COUNT];
        for item in &items {
            counts[item.spec.label.index()] += 1;
        }
        assert!(counts.iter().all(|&c| c == 2));
        assert!(sample_dataset(50, &mut rng, true).is_err());
    }

    #[test]
    fn uniform_dataset_frequencies_bounded() {
        let mut rng = RngStream::new(7, 0);
        let items = sample_dataset(4800, &mut rng, false).unwrap();
        let mut counts = [0usize; COMBO_COUNT];
        for item in &items {
            counts[item.spec.label.index()] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!((60..=140).contains(&c), "combo {i} count {c}");
        }
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        let mut a = RngStream::new(9, 1);
        let mut b = RngStream::new(9, 1);
        let xs = sample_dataset(16, &mut a, false).unwrap();
        let ys = sample_dataset(16, &mut b, false).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(x.spec, y.spec);
            assert_eq!(x.image.data(), y.image.data());
        }
    }

    #[test]
    fn label_kv_round_trip() {
        for label in AttributeLabel::all() {
            let parsed = AttributeLabel::parse_kv(&label.to_string()).unwrap();
            assert_eq!(parsed, label);
        }
        assert!(AttributeLabel::parse_kv("layout=XX,content=circle,material=solid").is_err());
        assert!(AttributeLabel::parse_kv("layout=TL").is_err());
    }
}
