//! Synthetic paired phantoms: a body silhouette and an internal structure
//! image that is a deterministic function of the silhouette's shape.
//!
//! Recipe:
//! - body: an ellipse whose radius is modulated by a few low-frequency
//!   sinusoids, slightly rotated and offset;
//! - structure, placed from the silhouette's area centroid and second
//!   moments: a spine disc (bone, 1.0), rib arcs following the boundary at a
//!   fixed inset (bone), and organ blobs at 0.4–0.7;
//! - everything is masked by the silhouette and snapped to the 8-bit grid,
//!   so writing and reading PGM files is lossless.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{snap_to_u8_grid, Image};
use crate::tensor::Tensor;

pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [32, 64, 128, 256];
pub const TEST_FRACTION: f64 = 0.2;

const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    /// Binary body silhouette (the network input).
    pub contour: Image,
    /// Internal structure (the network target).
    pub structure: Image,
    pub seed: u64,
    pub index: u64,
}

/// Parameters of one body outline in unit-square coordinates.
struct Body {
    center: (f64, f64),
    semi_axes: (f64, f64),
    rotation: f64,
    /// (harmonic, amplitude, phase)
    ripples: Vec<(f64, f64, f64)>,
}

impl Body {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let center = (0.5 + rng.gen_range(-0.04..0.04), 0.5 + rng.gen_range(-0.04..0.04));
        let semi_axes = (rng.gen_range(0.30..0.40), rng.gen_range(0.24..0.33));
        let rotation = rng.gen_range(-0.3..0.3);
        let ripples = (2..=4)
            .map(|k| (k as f64, rng.gen_range(0.0..0.04), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        Body {
            center,
            semi_axes,
            rotation,
            ripples,
        }
    }

    /// Normalized elliptical radius and angle of a point in the body frame.
    fn polar(&self, u: f64, v: f64) -> (f64, f64) {
        let (dx, dy) = (u - self.center.0, v - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let (bx, by) = (c * dx + s * dy, -s * dx + c * dy);
        let (ex, ey) = (bx / self.semi_axes.0, by / self.semi_axes.1);
        ((ex * ex + ey * ey).sqrt(), ey.atan2(ex))
    }

    fn boundary_radius(&self, angle: f64) -> f64 {
        1.0 + self
            .ripples
            .iter()
            .map(|&(k, a, p)| a * (k * angle + p).cos())
            .sum::<f64>()
    }

    /// Radius relative to the boundary: < 1 inside.
    fn relative_radius(&self, u: f64, v: f64) -> f64 {
        let (rho, angle) = self.polar(u, v);
        rho / self.boundary_radius(angle)
    }
}

/// Area centroid and principal axes of a binary mask, in unit coordinates.
struct Moments {
    centroid: (f64, f64),
    major_dir: (f64, f64),
    minor_dir: (f64, f64),
    major_std: f64,
    minor_std: f64,
}

impl Moments {
    fn of(mask: &Image, res: usize) -> Self {
        let px = |i: usize| (i as f64 + 0.5) / res as f64;
        let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for r in 0..res {
            for c in 0..res {
                if mask.get(c, r) > 0.0 {
                    n += 1.0;
                    sx += px(c);
                    sy += px(r);
                }
            }
        }
        let (mx, my) = (sx / n, sy / n);
        let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
        for r in 0..res {
            for c in 0..res {
                if mask.get(c, r) > 0.0 {
                    let (dx, dy) = (px(c) - mx, px(r) - my);
                    cxx += dx * dx;
                    cyy += dy * dy;
                    cxy += dx * dy;
                }
            }
        }
        let (cxx, cyy, cxy) = (cxx / n, cyy / n, cxy / n);
        let half_trace = 0.5 * (cxx + cyy);
        let disc = (0.25 * (cxx - cyy).powi(2) + cxy * cxy).sqrt();
        let (l1, l2) = (half_trace + disc, (half_trace - disc).max(1e-12));
        let theta = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
        let major_dir = (theta.cos(), theta.sin());
        // minor axis points toward +v (down the image), the "posterior" side
        let mut minor_dir = (-theta.sin(), theta.cos());
        if minor_dir.1 < 0.0 {
            minor_dir = (-minor_dir.0, -minor_dir.1);
        }
        Moments {
            centroid: (mx, my),
            major_dir,
            minor_dir,
            major_std: l1.sqrt(),
            minor_std: l2.sqrt(),
        }
    }

    fn at(&self, along_major: f64, along_minor: f64) -> (f64, f64) {
        (
            self.centroid.0 + along_major * self.major_dir.0 + along_minor * self.minor_dir.0,
            self.centroid.1 + along_major * self.major_dir.1 + along_minor * self.minor_dir.1,
        )
    }

    /// Coordinates of (u, v) in the principal frame relative to the centroid.
    fn local(&self, u: f64, v: f64) -> (f64, f64) {
        let (dx, dy) = (u - self.centroid.0, v - self.centroid.1);
        (
            dx * self.major_dir.0 + dy * self.major_dir.1,
            dx * self.minor_dir.0 + dy * self.minor_dir.1,
        )
    }
}

struct Blob {
    center: (f64, f64),
    radii: (f64, f64),
    value: f64,
}

fn pair_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate_phantom_pair(seed: u64, index: u64, resolution: usize) -> Result<PhantomPair> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::contract(format!(
            "phantom resolution must be one of {SUPPORTED_RESOLUTIONS:?}, got {resolution}"
        )));
    }
    let mut rng = pair_rng(seed, index);
    let body = Body::sample(&mut rng);
    let res = resolution;
    let unit = |i: usize| (i as f64 + 0.5) / res as f64;

    let contour = Image::from_fn(res, res, |c, r| {
        if body.relative_radius(unit(c), unit(r)) <= 1.0 {
            1.0f32
        } else {
            0.0
        }
    });
    let m = Moments::of(&contour, res);

    let jitter = |rng: &mut ChaCha8Rng, scale: f64| rng.gen_range(-scale..scale);
    let spine_center = m.at(
        jitter(&mut rng, 0.05) * m.minor_std,
        (1.1 + jitter(&mut rng, 0.05)) * m.minor_std,
    );
    let spine_radius = 0.35 * m.minor_std;

    let mut organs = Vec::new();
    for side in [-1.0, 1.0] {
        organs.push(Blob {
            center: m.at(
                side * (0.9 + jitter(&mut rng, 0.1)) * m.major_std,
                (-0.1 + jitter(&mut rng, 0.1)) * m.minor_std,
            ),
            radii: (0.55 * m.major_std, 0.7 * m.minor_std),
            value: rng.gen_range(0.4..0.7),
        });
    }
    organs.push(Blob {
        center: m.at(jitter(&mut rng, 0.1) * m.major_std, -0.7 * m.minor_std),
        radii: (0.45 * m.major_std, 0.5 * m.minor_std),
        value: rng.gen_range(0.4..0.7),
    });

    // Rib arcs: angular sectors of a band at a fixed inset from the outline,
    // on the posterior half of the body.
    let rib_count = 5;
    let rib_phase = jitter(&mut rng, 0.1);
    let (band_lo, band_hi) = (0.80, 0.88);

    let structure = Image::from_fn(res, res, |c, r| {
        if contour.get(c, r) == 0.0 {
            return 0.0;
        }
        let (u, v) = (unit(c), unit(r));
        let rel = body.relative_radius(u, v);
        let (a, b) = m.local(u, v);
        let mut value = 0.0;
        for o in &organs {
            let (oa, ob) = m.local(o.center.0, o.center.1);
            let (da, db) = ((a - oa) / o.radii.0, (b - ob) / o.radii.1);
            if da * da + db * db <= 1.0 {
                value = o.value;
            }
        }
        let (ds, dt) = (u - spine_center.0, v - spine_center.1);
        if ds * ds + dt * dt <= spine_radius * spine_radius {
            value = 1.0;
        }
        if (band_lo..=band_hi).contains(&rel) && b > 0.0 {
            let angle = b.atan2(a);
            let sector = angle / PI * rib_count as f64 + rib_phase;
            if sector.rem_euclid(1.0) < 0.45 {
                value = 1.0;
            }
        }
        snap_to_u8_grid(value as f32)
    });

    Ok(PhantomPair {
        contour,
        structure,
        seed,
        index,
    })
}

pub fn fill_fraction(img: &Image) -> f64 {
    img.data.iter().filter(|&&v| v > 0.0).count() as f64 / img.data.len() as f64
}

/// Deterministic shuffled split; `round(test_fraction · count)` go to test.
/// Both lists are returned in ascending order.
pub fn split_dataset(count: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if count < 5 {
        return Err(Error::contract(format!("dataset split needs at least 5 items, got {count}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::contract(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_fraction * count as f64).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Map [0, 1] pixel values to the training range [−1, 1].
pub fn to_training_range(v: f32) -> f32 {
    2.0 * v - 1.0
}

pub fn from_training_range(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// An in-memory corpus of phantom pairs, generated or read from disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub resolution: usize,
    pub pairs: Vec<PhantomPair>,
}

impl Corpus {
    pub fn generate(seed: u64, count: usize, resolution: usize) -> Result<Self> {
        let pairs = (0..count as u64)
            .map(|i| generate_phantom_pair(seed, i, resolution))
            .collect::<Result<_>>()?;
        Ok(Corpus {
            seed,
            resolution,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for p in &self.pairs {
            p.contour.write_pgm(dir.join(format!("{:06}_y.pgm", p.index)))?;
            p.structure.write_pgm(dir.join(format!("{:06}_x.pgm", p.index)))?;
        }
        fs::write(
            dir.join(MANIFEST),
            format!(
                "count {}\nseed {}\nresolution {}\n",
                self.pairs.len(),
                self.seed,
                self.resolution
            ),
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = fs::read_to_string(dir.join(MANIFEST))?;
        let (mut count, mut seed, mut resolution) = (None, None, None);
        for (n, line) in manifest.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let (Some(key), Some(val), None) = (parts.next(), parts.next(), parts.next()) else {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(Error::parse(
                    crate::error::Location::Line(n + 1),
                    "expected `key value`",
                ));
            };
            let bad = || Error::parse(crate::error::Location::Line(n + 1), format!("bad value {val:?}"));
            match key {
                "count" => count = Some(val.parse::<usize>().map_err(|_| bad())?),
                "seed" => seed = Some(val.parse::<u64>().map_err(|_| bad())?),
                "resolution" => resolution = Some(val.parse::<usize>().map_err(|_| bad())?),
                _ => {}
            }
        }
        let missing = |k: &str| Error::Format(format!("manifest is missing `{k}`"));
        let count = count.ok_or_else(|| missing("count"))?;
        let seed = seed.ok_or_else(|| missing("seed"))?;
        let resolution = resolution.ok_or_else(|| missing("resolution"))?;

        let mut pairs = Vec::with_capacity(count);
        for index in 0..count {
            let contour = Image::read_pgm(dir.join(format!("{index:06}_y.pgm")))?;
            let structure = Image::read_pgm(dir.join(format!("{index:06}_x.pgm")))?;
            for img in [&contour, &structure] {
                if img.width != resolution || img.height != resolution {
                    return Err(Error::dim(format!(
                        "pair {index}: image is {}x{}, manifest says {resolution}",
                        img.width, img.height
                    )));
                }
            }
            pairs.push(PhantomPair {
                contour,
                structure,
                seed,
                index: index as u64,
            });
        }
        Ok(Corpus {
            seed,
            resolution,
            pairs,
        })
    }

    /// Stack the given pairs into `(y, x)` tensors of shape [B, 1, R, R]
    /// in the training range.
    pub fn tensors(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        stack_pairs(indices.iter().map(|&i| &self.pairs[i]), self.resolution)
    }

    /// Shuffled mini-batches over `indices` for one epoch.
    pub fn batches<'a>(
        &'a self,
        indices: &[usize],
        batch_size: usize,
        epoch_seed: u64,
    ) -> impl Iterator<Item = Result<(Tensor, Tensor)>> + 'a {
        let order = epoch_order(indices, epoch_seed);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.tensors(&c))
    }
}

/// Every index exactly once, in an order determined by `epoch_seed`.
pub fn epoch_order(indices: &[usize], epoch_seed: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order
}

/// Index batches for one epoch: sizes are `batch_size` except possibly the last.
pub fn load_batch(indices: &[usize], batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    epoch_order(indices, epoch_seed)
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

fn stack_pairs<'a>(
    pairs: impl Iterator<Item = &'a PhantomPair>,
    res: usize,
) -> Result<(Tensor, Tensor)> {
    let (mut ys, mut xs, mut b) = (Vec::new(), Vec::new(), 0);
    for p in pairs {
        ys.extend(p.contour.data.iter().map(|&v| to_training_range(v)));
        xs.extend(p.structure.data.iter().map(|&v| to_training_range(v)));
        b += 1;
    }
    if b == 0 {
        return Err(Error::contract("empty batch"));
    }
    Ok((
        Tensor::from_vec(&[b, 1, res, res], ys)?,
        Tensor::from_vec(&[b, 1, res, res], xs)?,
    ))
}
