//! Block-wise spatially varying image degradation and MTF from PSFs.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_NOISE_SIGMA: f64 = 0.03;
/// Kernels with at most this many nonzero taps are applied directly.
const SPARSE_TAPS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("image {width}x{height} is not divisible into {rows}x{cols} blocks")]
    Blocks {
        width: usize,
        height: usize,
        rows: usize,
        cols: usize,
    },
    #[error("PSF has no energy")]
    ZeroPsf,
    #[error("PSF grid must be square with odd side, got {0} samples")]
    PsfShape(usize),
    #[error("PSF provider failed for block ({row}, {col}): {message}")]
    Provider {
        row: usize,
        col: usize,
        message: String,
    },
    #[error("image data has {got} samples, expected {expected}")]
    Size { got: usize, expected: usize },
}

/// Three-channel image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub width: usize,
    pub height: usize,
    /// µm
    pub pitch: f64,
    pub channels: [Vec<f64>; 3],
}

impl SceneImage {
    pub fn new(width: usize, height: usize, pitch: f64, channels: [Vec<f64>; 3]) -> Result<Self, ImagingError> {
        for c in &channels {
            if c.len() != width * height {
                return Err(ImagingError::Size {
                    got: c.len(),
                    expected: width * height,
                });
            }
        }
        let channels = channels.map(|c| c.into_iter().map(|v| v.clamp(0.0, 1.0)).collect());
        Ok(SceneImage {
            width,
            height,
            pitch,
            channels,
        })
    }

    pub fn filled(width: usize, height: usize, pitch: f64, value: [f64; 3]) -> Self {
        SceneImage {
            width,
            height,
            pitch,
            channels: value.map(|v| vec![v.clamp(0.0, 1.0); width * height]),
        }
    }
}

/// Square kernel of odd side, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub side: usize,
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn new(taps: Vec<f64>) -> Result<Self, ImagingError> {
        let side = (taps.len() as f64).sqrt().round() as usize;
        if side * side != taps.len() || side % 2 == 0 {
            return Err(ImagingError::PsfShape(taps.len()));
        }
        Ok(Kernel { side, taps })
    }

    pub fn delta() -> Self {
        Kernel {
            side: 1,
            taps: vec![1.0],
        }
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }
}

/// Resample a PSF from the simulation pitch to twice that pitch. Each output
/// pixel covers two input pixels centred on an odd input index, so edge-sharing
/// even pixels are split in half; the result is renormalized to unit sum.
pub fn bin_psf(psf: &[f64]) -> Result<Kernel, ImagingError> {
    let k = Kernel::new(psf.to_vec())?;
    let n = k.side;
    if n < 3 {
        return Ok(k);
    }
    let m = (n - 1) / 2;
    let w = |i: usize, o: usize| -> f64 {
        // weight of input index i in output o (centre 2o+1)
        let c = 2 * o + 1;
        if i == c {
            1.0
        } else if i + 1 == c || i == c + 1 {
            0.5
        } else {
            0.0
        }
    };
    let mut out = vec![0.0; m * m];
    for oy in 0..m {
        for ox in 0..m {
            let mut s = 0.0;
            for iy in 2 * oy..=2 * oy + 2 {
                for ix in 2 * ox..=2 * ox + 2 {
                    s += w(iy, oy) * w(ix, ox) * k.taps[iy * n + ix];
                }
            }
            out[oy * m + ox] = s;
        }
    }
    let total: f64 = out.iter().sum();
    if total <= 0.0 {
        return Err(ImagingError::ZeroPsf);
    }
    out.iter_mut().for_each(|v| *v /= total);
    Kernel::new(out)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Convolve a `w × h` plane with `k`, reflecting across the plane border.
pub fn convolve_reflect(plane: &[f64], w: usize, h: usize, k: &Kernel) -> Vec<f64> {
    let r = k.radius() as isize;
    let nonzero: Vec<(isize, isize, f64)> = k
        .taps
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, &v)| ((i / k.side) as isize - r, (i % k.side) as isize - r, v))
        .collect();
    if nonzero.len() <= SPARSE_TAPS {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for &(dy, dx, v) in &nonzero {
                    // true convolution: the kernel is mirrored
                    let sy = reflect(y as isize - dy, h);
                    let sx = reflect(x as isize - dx, w);
                    s += v * plane[sy * w + sx];
                }
                out[y * w + x] = s;
            }
        }
        return out;
    }
    convolve_fft(plane, w, h, k)
}

/// Circular convolution over the reflect-padded plane; with padding equal to
/// the kernel radius the wrap never reaches the interior.
fn convolve_fft(plane: &[f64], w: usize, h: usize, k: &Kernel) -> Vec<f64> {
    let r = k.radius();
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let mut a = vec![Complex64::new(0.0, 0.0); pw * ph];
    for y in 0..ph {
        let sy = reflect(y as isize - r as isize, h);
        for x in 0..pw {
            let sx = reflect(x as isize - r as isize, w);
            a[y * pw + x] = Complex64::new(plane[sy * w + sx], 0.0);
        }
    }
    let mut b = vec![Complex64::new(0.0, 0.0); pw * ph];
    for ky in 0..k.side {
        for kx in 0..k.side {
            // kernel centre at the origin, negative offsets wrapped
            let y = (ky + ph - r) % ph;
            let x = (kx + pw - r) % pw;
            b[y * pw + x] = Complex64::new(k.taps[ky * k.side + kx], 0.0);
        }
    }
    let mut planner = FftPlanner::new();
    fft2(&mut planner, &mut a, pw, ph, false);
    fft2(&mut planner, &mut b, pw, ph, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    fft2(&mut planner, &mut a, pw, ph, true);
    let norm = (pw * ph) as f64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = a[(y + r) * pw + x + r].re / norm;
        }
    }
    out
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex64], w: usize, h: usize, inverse: bool) {
    let row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
}

/// Block layout and noise for [`degrade`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DegradeSettings {
    pub rows: usize,
    pub cols: usize,
    pub sigma: f64,
    pub seed: u64,
}

/// Image-plane position of a block centre, mm from the image centre, with
/// `+y` upwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockCenter {
    pub row: usize,
    pub col: usize,
    pub x: f64,
    pub y: f64,
}

/// Convolve each block of `scene` with the kernels returned for its centre,
/// add white Gaussian noise and clip to `[0, 1]`. The provider returns one
/// kernel per channel, already at the sensor pitch.
pub fn degrade<F>(scene: &SceneImage, settings: &DegradeSettings, provider: F) -> Result<SceneImage, ImagingError>
where
    F: Fn(BlockCenter) -> Result<[Kernel; 3], String> + Sync,
{
    let (rows, cols) = (settings.rows, settings.cols);
    if rows == 0 || cols == 0 || scene.height % rows != 0 || scene.width % cols != 0 {
        return Err(ImagingError::Blocks {
            width: scene.width,
            height: scene.height,
            rows,
            cols,
        });
    }
    let (bh, bw) = (scene.height / rows, scene.width / cols);
    let pitch_mm = scene.pitch * 1e-3;
    let blocks: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    let noise = if settings.sigma > 0.0 {
        Some(Normal::new(0.0, settings.sigma).map_err(|e| ImagingError::Provider {
            row: 0,
            col: 0,
            message: e.to_string(),
        })?)
    } else {
        None
    };
    let results: Vec<[Vec<f64>; 3]> = blocks
        .par_iter()
        .map(|&(row, col)| {
            let centre = BlockCenter {
                row,
                col,
                x: ((col as f64 + 0.5) * bw as f64 - scene.width as f64 / 2.0) * pitch_mm,
                y: (scene.height as f64 / 2.0 - (row as f64 + 0.5) * bh as f64) * pitch_mm,
            };
            let kernels = provider(centre).map_err(|message| ImagingError::Provider { row, col, message })?;
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream((row * cols + col) as u64);
            let mut out: [Vec<f64>; 3] = Default::default();
            for (ch, k) in kernels.iter().enumerate() {
                let mut block = Vec::with_capacity(bw * bh);
                for y in 0..bh {
                    let start = (row * bh + y) * scene.width + col * bw;
                    block.extend_from_slice(&scene.channels[ch][start..start + bw]);
                }
                let mut conv = convolve_reflect(&block, bw, bh, k);
                if let Some(n) = &noise {
                    for v in &mut conv {
                        *v += n.sample(&mut rng);
                    }
                }
                conv.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                out[ch] = conv;
            }
            Ok(out)
        })
        .collect::<Result<_, ImagingError>>()?;
    let mut channels: [Vec<f64>; 3] = Default::default();
    for c in &mut channels {
        *c = vec![0.0; scene.width * scene.height];
    }
    for (&(row, col), block) in blocks.iter().zip(&results) {
        for (ch, data) in block.iter().enumerate() {
            for y in 0..bh {
                let dst = (row * bh + y) * scene.width + col * bw;
                channels[ch][dst..dst + bw].copy_from_slice(&data[y * bw..(y + 1) * bw]);
            }
        }
    }
    Ok(SceneImage {
        width: scene.width,
        height: scene.height,
        pitch: scene.pitch,
        channels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MtfDirection {
    Sagittal,
    Tangential,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MtfCurve {
    pub direction: MtfDirection,
    pub wavelength: f64,
    /// cycles/mm, from 0 to Nyquist.
    pub frequencies: Vec<f64>,
    pub modulation: Vec<f64>,
}

/// Sagittal and tangential MTF of a square PSF sampled at `pitch` mm. The
/// axis cuts of the 2-D transform through DC equal the 1-D transforms of the
/// PSF's marginals, which is how they are computed.
pub fn mtf_from_psf(psf: &[f64], pitch: f64, wavelength: f64) -> Result<(MtfCurve, MtfCurve), ImagingError> {
    let k = Kernel::new(psf.to_vec())?;
    let n = k.side;
    let total: f64 = psf.iter().sum();
    if !(total > 0.0) {
        return Err(ImagingError::ZeroPsf);
    }
    let mut along_x = vec![0.0; n];
    let mut along_y = vec![0.0; n];
    for y in 0..n {
        for x in 0..n {
            let v = k.taps[y * n + x];
            along_x[x] += v;
            along_y[y] += v;
        }
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let cut = |profile: &[f64]| -> Vec<f64> {
        let mut buf: Vec<Complex64> = profile.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.process(&mut buf);
        let dc = buf[0].norm();
        buf[..=n / 2].iter().map(|c| c.norm() / dc).collect()
    };
    let frequencies: Vec<f64> = (0..=n / 2).map(|i| i as f64 / (n as f64 * pitch)).collect();
    // meridional plane is y–z: tangential detail varies along y
    Ok((
        MtfCurve {
            direction: MtfDirection::Sagittal,
            wavelength,
            frequencies: frequencies.clone(),
            modulation: cut(&along_x),
        },
        MtfCurve {
            direction: MtfDirection::Tangential,
            wavelength,
            frequencies,
            modulation: cut(&along_y),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_scene(w: usize, h: usize, seed: u64) -> SceneImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ch = || (0..w * h).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
        SceneImage::new(w, h, 1.2, [ch(), ch(), ch()]).unwrap()
    }

    fn settings(rows: usize, cols: usize) -> DegradeSettings {
        DegradeSettings {
            rows,
            cols,
            sigma: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn delta_is_identity() {
        let s = random_scene(40, 30, 1);
        let out = degrade(&s, &settings(3, 4), |_| Ok([Kernel::delta(), Kernel::delta(), Kernel::delta()])).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn box_blur_keeps_flat_field() {
        let s = SceneImage::filled(20, 20, 1.2, [0.25, 0.5, 0.75]);
        let k = Kernel::new(vec![1.0 / 9.0; 9]).unwrap();
        let out = degrade(&s, &settings(2, 2), |_| Ok([k.clone(), k.clone(), k.clone()])).unwrap();
        for (a, b) in out.channels.iter().zip(&s.channels) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fft_path_matches_direct() {
        let s = random_scene(24, 18, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let taps: Vec<f64> = (0..81).map(|_| rng.random::<f64>()).collect();
        let k = Kernel::new(taps.clone()).unwrap();
        let fast = convolve_fft(&s.channels[0], 24, 18, &k);
        // direct reference
        let mut slow = vec![0.0; 24 * 18];
        for y in 0..18 {
            for x in 0..24 {
                let mut acc = 0.0;
                for ky in 0..9 {
                    for kx in 0..9 {
                        let sy = reflect(y as isize - (ky as isize - 4), 18);
                        let sx = reflect(x as isize - (kx as isize - 4), 24);
                        acc += taps[ky * 9 + kx] * s.channels[0][sy * 24 + sx];
                    }
                }
                slow[y * 24 + x] = acc;
            }
        }
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_delta_moves_content() {
        // tap one pixel right of centre: output(x) = input(x − 1)
        let mut taps = vec![0.0; 9];
        taps[5] = 1.0;
        let k = Kernel::new(taps).unwrap();
        let plane: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = convolve_reflect(&plane, 4, 4, &k);
        assert_eq!(out[1], plane[0]);
        assert_eq!(out[6], plane[5]);
    }

    #[test]
    fn blocks_must_divide() {
        let s = SceneImage::filled(10, 10, 1.2, [0.0; 3]);
        let r = degrade(&s, &settings(3, 3), |_| Ok([Kernel::delta(), Kernel::delta(), Kernel::delta()]));
        assert!(matches!(r, Err(ImagingError::Blocks { .. })));
    }

    #[test]
    fn noise_is_seeded() {
        let s = SceneImage::filled(16, 16, 1.2, [0.5; 3]);
        let st = DegradeSettings {
            sigma: 0.03,
            ..settings(2, 2)
        };
        let d = |_: BlockCenter| Ok([Kernel::delta(), Kernel::delta(), Kernel::delta()]);
        let a = degrade(&s, &st, d).unwrap();
        let b = degrade(&s, &st, d).unwrap();
        assert_eq!(a, b);
        let mean: f64 = a.channels[0].iter().sum::<f64>() / 256.0;
        assert!((mean - 0.5).abs() < 0.01);
        assert_ne!(a.channels[0], a.channels[1]);
    }

    #[test]
    fn binning_halves_the_grid() {
        let mut psf = vec![0.0; 63 * 63];
        psf[31 * 63 + 31] = 1.0;
        let k = bin_psf(&psf).unwrap();
        assert_eq!(k.side, 31);
        assert_eq!(k.taps[15 * 31 + 15], 1.0);
        let flat = vec![1.0; 63 * 63];
        let k = bin_psf(&flat).unwrap();
        assert!((k.taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_mtf_is_flat() {
        let mut psf = vec![0.0; 15 * 15];
        psf[7 * 15 + 7] = 1.0;
        let (s, t) = mtf_from_psf(&psf, 0.6e-3, 587.6).unwrap();
        assert!(s.modulation.iter().chain(&t.modulation).all(|&m| (m - 1.0).abs() < 1e-12));
        assert!((s.frequencies[7] - 7.0 / (15.0 * 0.6e-3)).abs() < 1e-9);
    }

    #[test]
    fn symmetric_psf_has_equal_cuts() {
        let n = 21;
        let psf: Vec<f64> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 - 10.0, (i / n) as f64 - 10.0);
                (-(x * x + y * y) / 8.0).exp()
            })
            .collect();
        let (s, t) = mtf_from_psf(&psf, 0.6e-3, 587.6).unwrap();
        assert_eq!(s.modulation[0], 1.0);
        for (a, b) in s.modulation.iter().zip(&t.modulation) {
            assert!((a - b).abs() < 1e-9 && *a <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn zero_psf_rejected() {
        assert_eq!(mtf_from_psf(&[0.0; 9], 1e-3, 500.0), Err(ImagingError::ZeroPsf));
    }
}
