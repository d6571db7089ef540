//! Images, datasets, PPM I/O, the synthetic shape renderer and the COCO
//! annotation loader.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{box_iou, BoxXyxy, GroundTruth};

/// 8-bit RGB image, row-major interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mirror image around the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Planar `[3, H, W]` values in `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c] as f32 / 255.0;
            }
        }
        out
    }
}

pub fn write_ppm<W: Write>(img: &Image, mut w: W) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    Ok(())
}

fn ppm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    String::from_utf8(tok).map_err(|_| Error::Format("non-ASCII PPM header".into()))
}

/// Reads a binary (P6) PPM with maxval 255.
pub fn read_ppm<R: Read>(r: R) -> Result<Image> {
    let mut r = BufReader::new(r);
    if ppm_token(&mut r)? != "P6" {
        return Err(Error::Format("not a binary PPM (P6) image".into()));
    }
    let mut num = || -> Result<usize> {
        let t = ppm_token(&mut r)?;
        t.parse()
            .map_err(|_| Error::Format(format!("bad PPM header field {t:?}")))
    };
    let (width, height, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    let mut pixels = vec![0u8; width * height * 3];
    r.read_exact(&mut pixels)
        .map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
    Ok(Image {
        width,
        height,
        pixels,
    })
}

pub fn save_ppm(img: &Image, path: &Path) -> Result<()> {
    write_ppm(img, std::io::BufWriter::new(fs::File::create(path)?))
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open image {}: {e}", path.display())))?;
    read_ppm(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub file_name: String,
    pub image: Image,
    pub gt: GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            s.gt.validate(self.num_classes())
                .map_err(|e| Error::Data(format!("image {}: {e}", s.id)))?;
        }
        Ok(())
    }

    /// First `n` samples and the rest, as two datasets.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |samples: &[Sample], split: &str| Dataset {
            samples: samples.to_vec(),
            class_names: self.class_names.clone(),
            split: split.to_string(),
        };
        (
            part(&self.samples[..n], "train"),
            part(&self.samples[n..], "val"),
        )
    }

    /// Writes `images/*.ppm` and `annotations.json` under `dir`.
    pub fn save_coco(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir)?;
        let mut coco = CocoFile::default();
        for (c, name) in self.class_names.iter().enumerate() {
            coco.categories.push(CocoCategory {
                id: c as u64,
                name: name.clone(),
            });
        }
        for s in &self.samples {
            save_ppm(&s.image, &img_dir.join(&s.file_name))?;
            coco.images.push(CocoImage {
                id: s.id,
                file_name: s.file_name.clone(),
                width: s.image.width,
                height: s.image.height,
            });
            for (b, &c) in s.gt.boxes.iter().zip(&s.gt.class_ids) {
                coco.annotations.push(CocoAnnotation {
                    id: Some(coco.annotations.len() as u64 + 1),
                    image_id: s.id,
                    category_id: c as u64,
                    bbox: [b[0], b[1], b[2] - b[0], b[3] - b[1]],
                });
            }
        }
        let text = serde_json::to_string_pretty(&coco)
            .map_err(|e| Error::Format(format!("annotation encoding: {e}")))?;
        fs::write(dir.join("annotations.json"), text)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disk,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Disk, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disk => "disk",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the pixel center `(px, py)` lies in the shape drawn inside
    /// the square `[x0, x0 + side) x [y0, y0 + side)`.
    fn covers(self, px: f64, py: f64, x0: f64, y0: f64, side: f64) -> bool {
        let (u, v) = ((px - x0) / side, (py - y0) / side);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self {
            Shape::Square => true,
            Shape::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // Apex at the top center, base along the bottom edge.
            Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_images: usize,
    pub image_size: usize,
    pub shapes: Vec<Shape>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range in pixels.
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_images: 200,
            image_size: 64,
            shapes: vec![Shape::Square, Shape::Triangle],
            min_objects: 1,
            max_objects: 3,
            min_side: 10,
            max_side: 40,
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, avoid: [u8; 3]) -> [u8; 3] {
    loop {
        let c = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
        let dist: i32 = (0..3).map(|k| (c[k] as i32 - avoid[k] as i32).abs()).sum();
        if dist >= 150 {
            return c;
        }
    }
}

/// Deterministic renderer: a noisy flat background with 1..n filled shapes
/// of random color. Ground-truth boxes are the tight pixel extents of what
/// was actually painted, so they are exact and inside the image.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.shapes.is_empty() || cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::Config(
            "synthetic data needs shapes and 1 <= min_objects <= max_objects".into(),
        ));
    }
    if cfg.min_side < 2 || cfg.min_side > cfg.max_side || cfg.max_side > cfg.image_size {
        return Err(Error::Config(format!(
            "object sides {}..{} do not fit a {} px image",
            cfg.min_side, cfg.max_side, cfg.image_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.image_size;
    let mut samples = Vec::with_capacity(cfg.num_images);
    for id in 0..cfg.num_images {
        let bg = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
        let mut img = Image::filled(n, n, bg);
        for p in img.pixels.iter_mut() {
            *p = (*p as i32 + rng.gen_range(-12..=12)).clamp(0, 255) as u8;
        }
        let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut gt = GroundTruth::default();
        let mut placed: Vec<BoxXyxy> = Vec::new();
        for _ in 0..count {
            // A few placement attempts to limit overlap; give up quietly.
            for _ in 0..20 {
                let side = rng.gen_range(cfg.min_side..=cfg.max_side);
                let x0 = rng.gen_range(0..=n - side);
                let y0 = rng.gen_range(0..=n - side);
                let square = [x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64];
                if placed.iter().any(|b| box_iou(b, &square) > 0.1) {
                    continue;
                }
                let class = rng.gen_range(0..cfg.shapes.len());
                let shape = cfg.shapes[class];
                let color = random_color(&mut rng, bg);
                let mut ext = [usize::MAX, usize::MAX, 0, 0];
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        if shape.covers(px, py, x0 as f64, y0 as f64, side as f64) {
                            img.put(x, y, color);
                            ext = [ext[0].min(x), ext[1].min(y), ext[2].max(x + 1), ext[3].max(y + 1)];
                        }
                    }
                }
                placed.push(square);
                gt.boxes
                    .push([ext[0] as f64, ext[1] as f64, ext[2] as f64, ext[3] as f64]);
                gt.class_ids.push(class);
                break;
            }
        }
        samples.push(Sample {
            id: id as u64,
            file_name: format!("{id:06}.ppm"),
            image: img,
            gt,
        });
    }
    Ok(Dataset {
        samples,
        class_names: cfg.shapes.iter().map(|s| s.name().to_string()).collect(),
        split: "synthetic".into(),
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Parses the COCO subset `images`, `annotations` (`bbox` as x, y, w, h) and
/// `categories`. Category ids are remapped to dense class indices in
/// ascending id order.
pub fn load_coco_json(annotations: &Path, images_dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(annotations)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", annotations.display())))?;
    let coco: CocoFile = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", annotations.display())))?;
    let mut cats: Vec<&CocoCategory> = coco.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let class_of: BTreeMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

    let mut samples = Vec::with_capacity(coco.images.len());
    let mut index = BTreeMap::new();
    for im in &coco.images {
        let path: PathBuf = images_dir.join(&im.file_name);
        let image = load_ppm(&path)?;
        if (image.width, image.height) != (im.width, im.height) {
            return Err(Error::Data(format!(
                "{}: header says {}x{}, file is {}x{}",
                im.file_name, im.width, im.height, image.width, image.height
            )));
        }
        index.insert(im.id, samples.len());
        samples.push(Sample {
            id: im.id,
            file_name: im.file_name.clone(),
            image,
            gt: GroundTruth::default(),
        });
    }
    for (k, a) in coco.annotations.iter().enumerate() {
        let &i = index.get(&a.image_id).ok_or_else(|| {
            Error::Data(format!("annotation {k} references missing image id {}", a.image_id))
        })?;
        let &c = class_of.get(&a.category_id).ok_or_else(|| {
            Error::Data(format!("annotation {k} references unknown category {}", a.category_id))
        })?;
        let [x, y, w, h] = a.bbox;
        let gt = &mut samples[i].gt;
        gt.boxes.push([x, y, x + w, y + h]);
        gt.class_ids.push(c);
    }
    let ds = Dataset {
        samples,
        class_names: cats.iter().map(|c| c.name.clone()).collect(),
        split: annotations
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    ds.validate()?;
    Ok(ds)
}
