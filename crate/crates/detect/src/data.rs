//! Synthetic moving-shape clips.
//!
//! Every object is a square whose class is carried only by its texture:
//! all textures share the same mean gray level, so a heavily blurred frame
//! still shows where an object is but not what it is. Objects drift one or
//! two pixels per frame and bounce off the borders. Frame 0 is always sharp.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdet_core::entropy::RgbImage;
use tdet_core::io::encode_ppm;
use tdet_core::{Error, Result};

use crate::boxes::BBox;

/// Mean gray level shared by every texture.
const OBJECT_MEAN: i32 = 128;
const TEXTURE_AMPLITUDE: i32 = 50;
const BLUR_RADIUS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    Noise,
    Flat,
    Stripes,
    Checker,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Noise, Texture::Flat, Texture::Stripes, Texture::Checker];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_box: usize,
    pub max_box: usize,
    /// Chance that a frame after the first is blurred.
    pub blur_prob: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 48,
            seq_len: 10,
            num_classes: 3,
            min_objects: 1,
            max_objects: 2,
            min_box: 14,
            max_box: 20,
            blur_prob: 0.35,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.image_size < 32 {
            return fail(format!("image_size must be >= 32, got {}", self.image_size));
        }
        if !(2..=4).contains(&self.num_classes) {
            return fail(format!("num_classes must be in 2..=4, got {}", self.num_classes));
        }
        if self.seq_len == 0 {
            return fail("seq_len must be >= 1".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!("bad object count range {}..={}", self.min_objects, self.max_objects));
        }
        if self.min_box < 4 || self.min_box > self.max_box || self.max_box * 2 > self.image_size {
            return fail(format!(
                "box sizes {}..={} do not fit a {} image",
                self.min_box, self.max_box, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return fail(format!("blur_prob must be in [0, 1], got {}", self.blur_prob));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyFrame {
    pub image: RgbImage,
    pub objects: Vec<Annotation>,
    pub blurred: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySequence {
    pub seed: u64,
    pub frames: Vec<ToyFrame>,
}

struct Mover {
    class: usize,
    size: usize,
    x: i32,
    y: i32,
    vx: i32,
    vy: i32,
    /// Row-major `size × size` gray texture, fixed for the clip.
    pattern: Vec<u8>,
}

fn texture_pattern(texture: Texture, size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (lo, hi) = ((OBJECT_MEAN - TEXTURE_AMPLITUDE) as u8, (OBJECT_MEAN + TEXTURE_AMPLITUDE) as u8);
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            match texture {
                Texture::Noise => rng.gen_range(lo..=hi),
                Texture::Flat => OBJECT_MEAN as u8,
                Texture::Stripes => if (y / 2) % 2 == 0 { lo } else { hi },
                Texture::Checker => if ((x / 2) + (y / 2)) % 2 == 0 { lo } else { hi },
            }
        })
        .collect()
}

fn velocity(rng: &mut ChaCha8Rng) -> i32 {
    let v = rng.gen_range(1..=2);
    if rng.gen() {
        v
    } else {
        -v
    }
}

fn advance(m: &mut Mover, limit: i32) {
    for (pos, vel) in [(&mut m.x, &mut m.vx), (&mut m.y, &mut m.vy)] {
        let next = *pos + *vel;
        if next < 0 || next > limit {
            *vel = -*vel;
        }
        *pos = (*pos + *vel).clamp(0, limit);
    }
}

/// Separable box blur, replicate borders, applied twice.
fn box_blur(gray: &[u8], size: usize) -> Vec<u8> {
    let r = BLUR_RADIUS as isize;
    let n = (2 * r + 1) as u32;
    let pass = |src: &[u8], horizontal: bool| -> Vec<u8> {
        let mut dst = vec![0u8; src.len()];
        for y in 0..size as isize {
            for x in 0..size as isize {
                let mut acc = 0u32;
                for d in -r..=r {
                    let (sx, sy) = if horizontal { (x + d, y) } else { (x, y + d) };
                    let (sx, sy) = (sx.clamp(0, size as isize - 1), sy.clamp(0, size as isize - 1));
                    acc += src[sy as usize * size + sx as usize] as u32;
                }
                dst[y as usize * size + x as usize] = ((acc + n / 2) / n) as u8;
            }
        }
        dst
    };
    let mut out = gray.to_vec();
    for _ in 0..2 {
        out = pass(&out, true);
        out = pass(&out, false);
    }
    out
}

fn render(movers: &[Mover], background: u8, size: usize) -> Vec<u8> {
    let mut gray = vec![background; size * size];
    for m in movers {
        for dy in 0..m.size {
            for dx in 0..m.size {
                gray[(m.y as usize + dy) * size + m.x as usize + dx] = m.pattern[dy * m.size + dx];
            }
        }
    }
    gray
}

fn generate_sequence(seed: u64, cfg: &DatasetConfig) -> Result<ToySequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    // Dark or bright background so every object differs from it in mean.
    let background: u8 = if rng.gen() { rng.gen_range(20..=70) } else { rng.gen_range(186..=236) };
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut movers = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..cfg.num_classes);
        let side = rng.gen_range(cfg.min_box..=cfg.max_box);
        let limit = (size - side) as i32;
        movers.push(Mover {
            class,
            size: side,
            x: rng.gen_range(0..=limit),
            y: rng.gen_range(0..=limit),
            vx: velocity(&mut rng),
            vy: velocity(&mut rng),
            pattern: texture_pattern(Texture::ALL[class], side, &mut rng),
        });
    }

    let mut frames = Vec::with_capacity(cfg.seq_len);
    for t in 0..cfg.seq_len {
        if t > 0 {
            for m in &mut movers {
                let limit = (size - m.size) as i32;
                advance(m, limit);
            }
        }
        let blurred = t > 0 && rng.gen_bool(cfg.blur_prob);
        let mut gray = render(&movers, background, size);
        if blurred {
            gray = box_blur(&gray, size);
        }
        let pixels = gray.iter().flat_map(|&v| [v, v, v]).collect();
        let objects = movers
            .iter()
            .map(|m| {
                let (x, y, s) = (m.x as f32, m.y as f32, m.size as f32);
                Ok(Annotation {
                    bbox: BBox::new(x, y, x + s, y + s)?,
                    class: m.class,
                })
            })
            .collect::<Result<_>>()?;
        frames.push(ToyFrame {
            image: RgbImage::new(size, size, pixels)?,
            objects,
            blurred,
        });
    }
    Ok(ToySequence { seed, frames })
}

/// `n_sequences` clips; clip `i` is generated from its own seed drawn from
/// `seed`, so prefixes of larger datasets are identical.
pub fn generate_dataset(seed: u64, n_sequences: usize, cfg: &DatasetConfig) -> Result<Vec<ToySequence>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n_sequences)
        .map(|_| generate_sequence(master.gen(), cfg))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    file: String,
    blurred: bool,
    objects: Vec<Annotation>,
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    seed: u64,
    frames: Vec<FrameRecord>,
}

/// Writes `seq_NNN/frame_NN.ppm` plus `seq_NNN/annotations.json` per clip.
pub fn save_dataset(dir: &Path, sequences: &[ToySequence]) -> Result<()> {
    for (i, seq) in sequences.iter().enumerate() {
        let sub = dir.join(format!("seq_{i:03}"));
        fs::create_dir_all(&sub)?;
        let mut frames = Vec::with_capacity(seq.frames.len());
        for (t, f) in seq.frames.iter().enumerate() {
            let file = format!("frame_{t:02}.ppm");
            fs::write(sub.join(&file), encode_ppm(f.image.width, f.image.height, &f.image.pixels))?;
            frames.push(FrameRecord {
                file,
                blurred: f.blurred,
                objects: f.objects.clone(),
            });
        }
        let record = SequenceRecord { seed: seq.seed, frames };
        fs::write(sub.join("annotations.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    }
    Ok(())
}
