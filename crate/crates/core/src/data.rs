//! Procedural shapes world: scene specs, renderer, caption template, corpus files.
//!
//! 3 shapes × 5 colors × 9 grid cells × 2 sizes = 270 scenes, each with exactly
//! one caption `a {size} {color} {shape} in the {row} {col}`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{input_err, Result, SeedError};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_SPECS: usize = 270;
pub const CAPTION_LEN: usize = 8;
pub const BACKGROUND: f32 = 0.5;

pub const PALETTE: [[f32; 3]; 5] = [
    [0.8, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.1, 0.1, 0.8],
    [0.8, 0.8, 0.1],
    [0.6, 0.1, 0.8],
];
pub const COLOR_WORDS: [&str; 5] = ["red", "green", "blue", "yellow", "purple"];
pub const SHAPE_WORDS: [&str; 3] = ["circle", "square", "triangle"];
pub const SIZE_WORDS: [&str; 2] = ["small", "large"];
pub const ROW_WORDS: [&str; 3] = ["top", "middle", "bottom"];
pub const COL_WORDS: [&str; 3] = ["left", "center", "right"];
/// Pixel coordinate of the cell centers along either axis.
pub const CELL_CENTERS: [i32; 3] = [6, 16, 26];
pub const SMALL_RADIUS: i32 = 3;
pub const LARGE_RADIUS: i32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle = 0,
    Square = 1,
    Triangle = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Size {
    Small = 0,
    Large = 1,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

impl Size {
    pub fn radius(self) -> i32 {
        match self {
            Size::Small => SMALL_RADIUS,
            Size::Large => LARGE_RADIUS,
        }
    }
}

/// One scene. Field order defines the lexicographic order used for tie-breaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    /// Palette index in `0..5`.
    pub color: u8,
    /// Grid cell in `0..9`, row-major.
    pub cell: u8,
    pub size: Size,
}

impl SceneSpec {
    pub fn new(shape: ShapeKind, color: u8, cell: u8, size: Size) -> Result<Self> {
        if color >= 5 || cell >= 9 {
            return Err(input_err("scene_spec", format!("color {color} / cell {cell} out of range")));
        }
        Ok(Self { shape, color, cell, size })
    }

    /// Dense index in `0..270`, increasing with the lexicographic order.
    pub fn index(&self) -> usize {
        ((self.shape as usize * 5 + self.color as usize) * 9 + self.cell as usize) * 2 + self.size as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= NUM_SPECS {
            return Err(input_err("scene_spec", format!("index {i} out of range")));
        }
        Ok(Self {
            shape: ShapeKind::ALL[i / 90],
            color: ((i / 18) % 5) as u8,
            cell: ((i / 2) % 9) as u8,
            size: if i.is_multiple_of(2) { Size::Small } else { Size::Large },
        })
    }

    pub fn all() -> impl Iterator<Item = SceneSpec> {
        (0..NUM_SPECS).map(|i| SceneSpec::from_index(i).expect("in range"))
    }

    pub fn row(&self) -> usize {
        self.cell as usize / 3
    }

    pub fn col(&self) -> usize {
        self.cell as usize % 3
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} in the {} {}",
            SIZE_WORDS[self.size as usize],
            COLOR_WORDS[self.color as usize],
            SHAPE_WORDS[self.shape as usize],
            ROW_WORDS[self.row()],
            COL_WORDS[self.col()]
        )
    }
}

pub fn sample_scene(rng: &mut Rng) -> SceneSpec {
    SceneSpec::from_index(rng.below(NUM_SPECS)).expect("in range")
}

fn inside(shape: ShapeKind, dx: i32, dy: i32, r: i32) -> bool {
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Triangle => (-r..=r).contains(&dy) && 2 * dx.abs() <= dy + r,
    }
}

/// Renders with the shape center shifted by `(dx, dy)` pixels.
pub fn render_jittered(spec: &SceneSpec, dx: i32, dy: i32) -> Tensor<f32> {
    let cx = CELL_CENTERS[spec.col()] + dx;
    let cy = CELL_CENTERS[spec.row()] + dy;
    let r = spec.size.radius();
    let color = PALETTE[spec.color as usize];
    let mut data = vec![BACKGROUND; IMAGE_LEN];
    let n = IMAGE_SIDE as i32;
    for y in (cy - r).max(0)..=(cy + r).min(n - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(n - 1) {
            if inside(spec.shape, x - cx, y - cy, r) {
                for (c, &v) in color.iter().enumerate() {
                    data[c * IMAGE_SIDE * IMAGE_SIDE + y as usize * IMAGE_SIDE + x as usize] = v;
                }
            }
        }
    }
    Tensor::new(vec![CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data).expect("image shape")
}

/// Canonical (unjittered) render, 3×32×32 in [0, 1].
pub fn render_scene(spec: &SceneSpec) -> Tensor<f32> {
    render_jittered(spec, 0, 0)
}

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const TEMPLATE_WORDS: [&str; 24] = [
    "a", "small", "large", "red", "green", "blue", "yellow", "purple", "circle", "square", "triangle", "in", "the",
    "top", "middle", "bottom", "left", "center", "right", "photo", "of", "generate", "an", "image",
];

/// Word-level vocabulary: specials at ids 0..4, then the template words.
#[derive(Clone, Debug)]
pub struct TextVocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for TextVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl TextVocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;

    pub fn new() -> Self {
        let words: Vec<String> = SPECIAL_TOKENS.iter().chain(TEMPLATE_WORDS.iter()).map(|s| s.to_string()).collect();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(&w.to_lowercase())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }
}

pub fn caption_tokens(spec: &SceneSpec, vocab: &TextVocab) -> Vec<usize> {
    vocab.encode(&spec.caption())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub spec: SceneSpec,
    pub image: Tensor<f32>,
    pub caption_ids: Vec<usize>,
}

impl ImageSample {
    pub fn new(spec: SceneSpec, dx: i32, dy: i32, vocab: &TextVocab) -> Self {
        Self { spec, image: render_jittered(&spec, dx, dy), caption_ids: caption_tokens(&spec, vocab) }
    }
}

/// Draws disjoint train / held-out splits.
///
/// With jitter, the pool is every (spec, offset) pair with offsets in
/// {-1, 0, 1}²; held-out takes `heldout` distinct specs, train draws from the
/// remaining pairs. Without jitter, held-out specs never appear in train.
pub fn build_splits(
    train: usize,
    heldout: usize,
    jitter: bool,
    vocab: &TextVocab,
    rng: &mut Rng,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    if heldout >= NUM_SPECS {
        return Err(input_err("build_splits", format!("held-out size {heldout} must be below {NUM_SPECS}")));
    }
    let offsets: Vec<(i32, i32)> = if jitter {
        (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dx, dy))).collect()
    } else {
        vec![(0, 0)]
    };
    let spec_order = rng.permutation(NUM_SPECS);
    let mut held_pairs = Vec::with_capacity(heldout);
    for &s in &spec_order[..heldout] {
        held_pairs.push((s, offsets[rng.below(offsets.len())]));
    }
    let mut pool: Vec<(usize, (i32, i32))> = if jitter {
        (0..NUM_SPECS)
            .flat_map(|s| offsets.iter().map(move |&o| (s, o)))
            .filter(|p| !held_pairs.contains(p))
            .collect()
    } else {
        spec_order[heldout..].iter().map(|&s| (s, (0, 0))).collect()
    };
    rng.shuffle(&mut pool);
    let train_pairs: Vec<_> = (0..train).map(|i| pool[i % pool.len()]).collect();
    let make = |pairs: &[(usize, (i32, i32))]| -> Vec<ImageSample> {
        pairs
            .iter()
            .map(|&(s, (dx, dy))| ImageSample::new(SceneSpec::from_index(s).expect("in range"), dx, dy, vocab))
            .collect()
    };
    Ok((make(&train_pairs), make(&held_pairs)))
}

pub const DATA_MAGIC: &[u8; 8] = b"SEEDDATA";
pub const DATA_VERSION: u32 = 1;

pub fn encode_dataset(samples: &[ImageSample]) -> Result<Vec<u8>> {
    if samples.is_empty() {
        return Err(input_err("dataset_io", "refusing to write an empty dataset"));
    }
    let mut out = Vec::with_capacity(16 + samples.len() * (6 + 2 * CAPTION_LEN + 4 * IMAGE_LEN));
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        if s.image.numel() != IMAGE_LEN {
            return Err(input_err("dataset_io", format!("image has {} values", s.image.numel())));
        }
        out.extend_from_slice(&[s.spec.shape as u8, s.spec.color, s.spec.cell, s.spec.size as u8]);
        out.extend_from_slice(&(s.caption_ids.len() as u16).to_le_bytes());
        for &id in &s.caption_ids {
            let id = u16::try_from(id).map_err(|_| input_err("dataset_io", format!("caption id {id} exceeds u16")))?;
            out.extend_from_slice(&id.to_le_bytes());
        }
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_record(buf: &[u8], pos: &mut usize) -> Result<Option<ImageSample>> {
    if *pos == buf.len() {
        return Ok(None);
    }
    let need = |p: usize, n: usize| -> Result<()> {
        if p + n > buf.len() {
            Err(SeedError::Truncated(format!("record at byte {p} needs {n} more bytes")))
        } else {
            Ok(())
        }
    };
    need(*pos, 6)?;
    let h = &buf[*pos..*pos + 6];
    let shape = *ShapeKind::ALL
        .get(h[0] as usize)
        .ok_or_else(|| input_err("dataset_io", format!("shape tag {}", h[0])))?;
    let size = match h[3] {
        0 => Size::Small,
        1 => Size::Large,
        t => return Err(input_err("dataset_io", format!("size tag {t}"))),
    };
    let spec = SceneSpec::new(shape, h[1], h[2], size)?;
    let cap_len = u16::from_le_bytes([h[4], h[5]]) as usize;
    *pos += 6;
    need(*pos, cap_len * 2 + IMAGE_LEN * 4)?;
    let caption_ids =
        buf[*pos..*pos + cap_len * 2].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect();
    *pos += cap_len * 2;
    let data = buf[*pos..*pos + IMAGE_LEN * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    *pos += IMAGE_LEN * 4;
    let image = Tensor::new(vec![CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?;
    Ok(Some(ImageSample { spec, image, caption_ids }))
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<ImageSample>> {
    if buf.len() < 8 || &buf[..8] != DATA_MAGIC {
        return Err(SeedError::BadMagic { expected: "SEEDDATA" });
    }
    if buf.len() < 16 {
        return Err(SeedError::Truncated("header".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != DATA_VERSION {
        return Err(SeedError::UnsupportedVersion(version));
    }
    let declared = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let mut pos = 16;
    let mut samples = Vec::with_capacity(declared);
    while samples.len() < declared {
        match decode_record(buf, &mut pos)? {
            Some(s) => samples.push(s),
            None => return Err(SeedError::CountMismatch { declared, found: samples.len() }),
        }
    }
    if pos != buf.len() {
        let mut found = declared;
        while let Ok(Some(_)) = decode_record(buf, &mut pos) {
            found += 1;
        }
        return Err(SeedError::CountMismatch { declared, found });
    }
    Ok(samples)
}

pub fn write_dataset(path: &Path, samples: &[ImageSample]) -> Result<()> {
    let bytes = encode_dataset(samples)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ImageSample>> {
    decode_dataset(&fs::read(path)?)
}

/// Binary PPM (`P6`, 8-bit) bytes of a channel-major `[3, H, W]` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(input_err("encode_ppm", format!("expected [3, H, W], got {:?}", image.shape())));
    };
    if c != CHANNELS {
        return Err(input_err("encode_ppm", format!("expected 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push((image.data()[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(img: &Tensor<f32>, c: usize, y: usize, x: usize) -> f32 {
        img.data()[c * 1024 + y * 32 + x]
    }

    #[test]
    fn ppm_header_and_pixels() {
        let img = render_scene(&SceneSpec::new(ShapeKind::Square, 0, 4, Size::Large).unwrap());
        let bytes = encode_ppm(&img).unwrap();
        let header = b"P6\n32 32\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + IMAGE_LEN);
        let center = header.len() + 3 * (16 * 32 + 16);
        let red: Vec<u8> = PALETTE[0].iter().map(|&v| (v * 255.0).round() as u8).collect();
        assert_eq!(&bytes[center..center + 3], &red[..]);
        assert!(encode_ppm(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn spec_index_round_trips() {
        for (i, s) in SceneSpec::all().enumerate() {
            assert_eq!(s.index(), i);
        }
        let mut specs: Vec<_> = SceneSpec::all().collect();
        let sorted = {
            let mut v = specs.clone();
            v.sort();
            v
        };
        assert_eq!(specs, sorted);
        specs.dedup();
        assert_eq!(specs.len(), 270);
    }

    #[test]
    fn background_and_center_pixels() {
        let spec = SceneSpec::new(ShapeKind::Circle, 0, 4, Size::Large).unwrap();
        let img = render_scene(&spec);
        assert_eq!([px(&img, 0, 16, 16), px(&img, 1, 16, 16), px(&img, 2, 16, 16)], [0.8, 0.1, 0.1]);
        assert_eq!([px(&img, 0, 0, 0), px(&img, 1, 0, 0), px(&img, 2, 0, 0)], [0.5, 0.5, 0.5]);
        assert_eq!(img, render_scene(&spec));
        let same_bits = img.data().iter().zip(render_scene(&spec).data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits);
    }

    #[test]
    fn every_pixel_is_background_or_palette() {
        for spec in SceneSpec::all() {
            let img = render_scene(&spec);
            let color = PALETTE[spec.color as usize];
            let mut shape_px = 0;
            for i in 0..1024 {
                let p = [img.data()[i], img.data()[1024 + i], img.data()[2048 + i]];
                if p == [0.5, 0.5, 0.5] {
                    continue;
                }
                assert_eq!(p, color);
                shape_px += 1;
            }
            assert!(shape_px > 0);
        }
    }

    #[test]
    fn caption_template() {
        let spec = SceneSpec::new(ShapeKind::Circle, 0, 0, Size::Large).unwrap();
        assert_eq!(spec.caption(), "a large red circle in the top left");
        let vocab = TextVocab::new();
        let mut captions = std::collections::HashSet::new();
        for s in SceneSpec::all() {
            let ids = caption_tokens(&s, &vocab);
            assert_eq!(ids.len(), CAPTION_LEN);
            assert!(!ids.contains(&TextVocab::UNK));
            assert_eq!(vocab.decode(&ids), s.caption());
            captions.insert(s.caption());
        }
        assert_eq!(captions.len(), 270);
    }

    #[test]
    fn sampling_is_deterministic_and_roughly_uniform() {
        let mut a = Rng::new(9);
        let mut b = Rng::new(9);
        assert_eq!(sample_scene(&mut a), sample_scene(&mut b));
        let mut counts = [0usize; NUM_SPECS];
        let mut r = Rng::new(11);
        let n = 10_000;
        for _ in 0..n {
            counts[sample_scene(&mut r).index()] += 1;
        }
        let expected = n as f64 / NUM_SPECS as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square with 269 dof: the 0.999 quantile is about 359.
        assert!(chi2 < 359.0, "chi2 {chi2}");
    }

    #[test]
    fn splits_are_disjoint() {
        let vocab = TextVocab::new();
        let (train, held) = build_splits(2048, 128, true, &vocab, &mut Rng::new(3)).unwrap();
        assert_eq!((train.len(), held.len()), (2048, 128));
        let held_specs: std::collections::HashSet<_> = held.iter().map(|s| s.spec).collect();
        assert_eq!(held_specs.len(), 128);
        for t in &train {
            for h in held.iter().filter(|h| h.spec == t.spec) {
                assert_ne!(t.image, h.image);
            }
        }
        let (train, held) = build_splits(300, 20, false, &vocab, &mut Rng::new(3)).unwrap();
        assert!(train.iter().all(|t| !held.iter().any(|h| h.spec == t.spec)));
    }

    #[test]
    fn dataset_errors_are_distinct() {
        let vocab = TextVocab::new();
        let (train, _) = build_splits(4, 1, true, &vocab, &mut Rng::new(1)).unwrap();
        let bytes = encode_dataset(&train).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), train);

        let mut bad = bytes.clone();
        bad[3] ^= 0xff;
        assert!(matches!(decode_dataset(&bad), Err(SeedError::BadMagic { .. })));
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 10]), Err(SeedError::Truncated(_))));
        let mut short = bytes.clone();
        short[12..16].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(decode_dataset(&short), Err(SeedError::CountMismatch { declared: 5, found: 4 })));
        let mut long = bytes;
        long[12..16].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_dataset(&long), Err(SeedError::CountMismatch { declared: 3, found: 4 })));
        assert!(encode_dataset(&[]).is_err());
    }
}
