//! Frozen projection plus a trainable low-rank adapter.
//!
//! `f = P x + (alpha / r) * B (A drop(x))`, with inverted dropout applied to
//! the adapter input in training mode only.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{AnchorRows, Label};
use crate::error::{Error, Result};
use crate::numeric::{self, Mat64, Vec64};
use crate::tape::{GradTape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// Frozen d x D projection.
    pub projection: Mat64,
    /// d x r, zero at initialization.
    pub lora_b: Mat64,
    /// r x D.
    pub lora_a: Mat64,
    pub alpha: f64,
    pub dropout_rate: f64,
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat64 {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Mat64::from_raw(rows, cols, data)
}

/// Either draw a fresh inverted-dropout mask (training) or use none (eval).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Train,
    Eval,
}

impl EncoderParams {
    pub fn init(
        input_dim: usize,
        feature_dim: usize,
        rank: usize,
        alpha: f64,
        dropout_rate: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (input_dim as f64).sqrt();
        let projection = gaussian_matrix(feature_dim, input_dim, std, rng);
        let lora_a = gaussian_matrix(rank, input_dim, std, rng);
        Self {
            projection,
            lora_b: Mat64::zeros(feature_dim, rank),
            lora_a,
            alpha,
            dropout_rate,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn rank(&self) -> usize {
        self.lora_a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `P + (alpha / r) B A`.
    pub fn effective_matrix(&self) -> Mat64 {
        let (d, dim_in, r) = (self.feature_dim(), self.input_dim(), self.rank());
        let s = self.scale();
        let mut out = self.projection.clone();
        let w = out.as_mut_slice();
        for i in 0..d {
            for k in 0..r {
                let b = s * self.lora_b.get(i, k);
                if b == 0.0 {
                    continue;
                }
                for j in 0..dim_in {
                    w[i * dim_in + j] += b * self.lora_a.get(k, j);
                }
            }
        }
        out
    }

    /// Inverted dropout mask over the adapter input: each entry is either 0
    /// or `1 / (1 - rate)`.
    pub fn draw_mask(&self, rng: &mut impl Rng) -> Vec<f64> {
        draw_dropout_mask(self.input_dim(), self.dropout_rate, rng)
    }

    /// Encode with an explicit adapter mask (`None` means no dropout).
    pub fn encode_with_mask(&self, x: &[f64], mask: Option<&[f64]>) -> Result<Vec64> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("encode", self.input_dim(), x.len()));
        }
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(Error::dim("encode mask", x.len(), m.len()));
            }
        }
        let (d, dim_in, r) = (self.feature_dim(), self.input_dim(), self.rank());
        let mut f = vec![0.0; d];
        numeric::matvec(self.projection.as_slice(), d, dim_in, x, &mut f);

        let dropped: Vec<f64> = match mask {
            Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => x.to_vec(),
        };
        let mut ax = vec![0.0; r];
        numeric::matvec(self.lora_a.as_slice(), r, dim_in, &dropped, &mut ax);
        let mut bax = vec![0.0; d];
        numeric::matvec(self.lora_b.as_slice(), d, r, &ax, &mut bax);
        let s = self.scale();
        f.iter_mut().zip(bax).for_each(|(a, b)| *a += s * b);
        Ok(Vec64::from_raw(f))
    }

    pub fn encode(&self, x: &[f64], mode: EncodeMode, rng: &mut impl Rng) -> Result<Vec64> {
        match mode {
            EncodeMode::Eval => self.encode_with_mask(x, None),
            EncodeMode::Train => {
                let mask = self.draw_mask(rng);
                self.encode_with_mask(x, Some(&mask))
            }
        }
    }
}

pub fn draw_dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect()
}

/// Tape handles for the encoder's tensors.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub projection: Var,
    pub lora_b: Var,
    pub lora_a: Var,
    pub scale: f64,
}

impl EncoderVars {
    pub fn register(tape: &mut GradTape, p: &EncoderParams) -> Self {
        Self {
            projection: tape.constant_mat(&p.projection),
            lora_b: tape.param_mat(&p.lora_b),
            lora_a: tape.param_mat(&p.lora_a),
            scale: p.scale(),
        }
    }

    pub fn encode(&self, tape: &mut GradTape, x: Var, mask: Option<Var>) -> Result<Var> {
        let base = tape.affine(self.projection, x)?;
        let input = match mask {
            Some(m) => tape.mul(x, m)?,
            None => x,
        };
        let ax = tape.affine(self.lora_a, input)?;
        let bax = tape.affine(self.lora_b, ax)?;
        let scaled = tape.scale(bax, self.scale)?;
        tape.add(base, scaled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorSource {
    Synthetic,
    Loaded,
}

/// Frozen label-prompt embeddings used to condition the noise generator.
#[derive(Clone, Debug, PartialEq)]
pub struct TextAnchors {
    pub real: Vec64,
    pub fake: Vec64,
    pub source: AnchorSource,
}

fn unit_gaussian(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl TextAnchors {
    pub fn synthetic(d: usize, rng: &mut impl Rng) -> Self {
        let real = unit_gaussian(d, rng);
        let fake = unit_gaussian(d, rng);
        Self {
            real: Vec64::from_raw(real),
            fake: Vec64::from_raw(fake),
            source: AnchorSource::Synthetic,
        }
    }

    pub fn from_rows(rows: &AnchorRows, feature_dim: usize) -> Result<Self> {
        if rows.real.len() != feature_dim || rows.fake.len() != feature_dim {
            return Err(Error::dim(
                "text anchors",
                feature_dim,
                format!("{}/{}", rows.real.len(), rows.fake.len()),
            ));
        }
        let widen = |v: &[f32]| Vec64::new(v.iter().map(|&x| x as f64).collect());
        let anchors = Self {
            real: widen(&rows.real)?,
            fake: widen(&rows.fake)?,
            source: AnchorSource::Loaded,
        };
        if anchors.real == anchors.fake {
            return Err(Error::Usage("text anchors for real and fake are identical".into()));
        }
        Ok(anchors)
    }

    pub fn anchor_for(&self, y: Label) -> &Vec64 {
        match y {
            Label::Real => &self.real,
            Label::Fake => &self.fake,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn params(seed: u64) -> EncoderParams {
        EncoderParams::init(8, 4, 2, 2.0, 0.5, &mut substream(seed, 0))
    }

    #[test]
    fn zero_adapter_is_projection_in_both_modes() {
        let p = params(1);
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let want = numeric::affine(&p.projection, &Vec64::new(x.clone()).unwrap()).unwrap();
        let mut rng = substream(2, 0);
        assert_eq!(p.encode(&x, EncodeMode::Eval, &mut rng).unwrap(), want);
        assert_eq!(p.encode(&x, EncodeMode::Train, &mut rng).unwrap(), want);
        // Independent of A as well.
        let mut q = p.clone();
        q.lora_a = Mat64::zeros(2, 8);
        assert_eq!(q.encode(&x, EncodeMode::Train, &mut rng).unwrap(), want);
    }

    #[test]
    fn hand_example() {
        let p = EncoderParams {
            projection: Mat64::from_rows(&[&[1.0, 0.0]]).unwrap(),
            lora_b: Mat64::from_rows(&[&[1.0]]).unwrap(),
            lora_a: Mat64::from_rows(&[&[0.0, 1.0]]).unwrap(),
            alpha: 1.0,
            dropout_rate: 0.0,
        };
        let f = p.encode_with_mask(&[3.0, 5.0], None).unwrap();
        assert_eq!(f.as_slice(), &[8.0]);
    }

    #[test]
    fn unit_scale_matches_effective_map() {
        let mut p = EncoderParams::init(6, 3, 6, 6.0, 0.0, &mut substream(3, 0));
        p.lora_b = gaussian_matrix(3, 6, 0.5, &mut substream(4, 0));
        assert_eq!(p.scale(), 1.0);
        let x = [0.1, -0.4, 2.0, 0.3, -1.0, 0.7];
        let eff = numeric::affine(&p.effective_matrix(), &Vec64::new(x.to_vec()).unwrap()).unwrap();
        let f = p.encode(&x, EncodeMode::Train, &mut substream(5, 0)).unwrap();
        for (a, b) in f.iter().zip(eff.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn inverted_dropout_is_unbiased() {
        let mut p = params(6);
        p.lora_b = gaussian_matrix(4, 2, 1.0, &mut substream(7, 0));
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let clean = p.encode_with_mask(&x, None).unwrap();
        let mut rng = substream(8, 0);
        let n = 10_000;
        let samples: Vec<Vec64> = (0..n)
            .map(|_| p.encode(&x, EncodeMode::Train, &mut rng).unwrap())
            .collect();
        for i in 0..4 {
            let vals: Vec<f64> = samples.iter().map(|s| s[i]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - clean[i]).abs() <= 3.0 * se, "coord {i}: {mean} vs {}", clean[i]);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = params(1);
        assert!(p.encode_with_mask(&[1.0; 7], None).is_err());
        assert!(p.encode_with_mask(&[1.0; 8], Some(&[1.0; 3])).is_err());
    }

    #[test]
    fn anchors() {
        let a = TextAnchors::synthetic(16, &mut substream(11, 0));
        let b = TextAnchors::synthetic(16, &mut substream(11, 0));
        assert_eq!(a, b);
        assert_ne!(a.real, a.fake);
        for v in [&a.real, &a.fake] {
            let n: f64 = v.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.anchor_for(Label::Real), &a.real);
        assert_eq!(a.anchor_for(Label::Fake), &a.fake);

        let rows = AnchorRows {
            real: vec![1.0, 0.0],
            fake: vec![0.0, 1.0],
        };
        assert_eq!(TextAnchors::from_rows(&rows, 2).unwrap().source, AnchorSource::Loaded);
        assert!(TextAnchors::from_rows(&rows, 3).is_err());
    }
}
