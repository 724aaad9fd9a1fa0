//! Multi-scale convolutional encoder and the MLP fusion of its four scales.

use crate::error::{Error, Result};
use crate::nn::{InitScheme, Linear, ParamRegistry};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Total downsampling of the coarsest scale.
pub const MAX_STRIDE: usize = 32;
/// Stride of the finest scale and of the fused face tokens.
pub const FACE_STRIDE: usize = 4;

/// Images `[B, 3, H, W]` with values in `[0, 1]` and `H, W` divisible by 32.
#[derive(Debug, Clone)]
pub struct ImageBatch<T> {
    pixels: Tensor<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::invalid(format!(
                "image batch must be [B, 3, H, W], got {s:?}"
            )));
        }
        check_geometry(s[2], s[3])?;
        if let Some(v) = pixels
            .data()
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<T> {
        self.pixels
    }

    pub fn batch(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }
}

pub fn check_geometry(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
        return Err(Error::invalid(format!(
            "image size {h}x{w} is not a positive multiple of {MAX_STRIDE}"
        )));
    }
    Ok(())
}

const COORD_PLANES: usize = 2;

fn coord_planes<T: Real>(b: usize, h: usize, w: usize) -> Tensor<T> {
    let axis = |i: usize, n: usize| T::lit((2 * i + 1) as f64 / n as f64 - 1.0);
    let mut v = Vec::with_capacity(b * COORD_PLANES * h * w);
    for _ in 0..b {
        v.extend((0..h * w).map(|p| axis(p % w, w)));
        v.extend((0..h * w).map(|p| axis(p / w, h)));
    }
    Tensor::new(&[b, COORD_PLANES, h, w], v).expect("sized")
}

/// A backbone producing scales at strides 4, 8, 16 and 32.
pub trait EncoderInterface {
    fn channels(&self) -> [usize; 4];

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        pixels: Var,
    ) -> Result<[Var; 4]>;
}

#[derive(Debug, Clone)]
struct Conv {
    weight: String,
    bias: String,
}

impl Conv {
    fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        reg.declare(&weight, &[cout, cin, 3, 3], InitScheme::XavierUniform)?;
        reg.declare(&bias, &[cout, 1, 1], InitScheme::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// 3x3 convolution, stride 2, padding 1, followed by GELU.
    fn forward<T: Real>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: Var) -> Result<Var> {
        let w = reg.bind(tape, &self.weight)?;
        let b = reg.bind(tape, &self.bias)?;
        let y = tape.conv2d(x, w, 2, 1)?;
        let y = tape.add(y, b)?;
        tape.gelu(y)
    }
}

/// Stride-2 convolution stages: two convs in the first stage, one after.
/// The first conv also sees two coordinate planes spanning [-1, 1].
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    channels: [usize; 4],
    stages: Vec<Vec<Conv>>,
}

impl ToyEncoder {
    pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 64, 128];

    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        channels: [usize; 4],
    ) -> Result<Self> {
        if channels.contains(&0) {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3 + COORD_PLANES;
        for (i, &c) in channels.iter().enumerate() {
            let mut convs = vec![Conv::new(reg, &format!("{prefix}.stage{i}.conv0"), cin, c)?];
            if i == 0 {
                convs.push(Conv::new(reg, &format!("{prefix}.stage{i}.conv1"), c, c)?);
            }
            stages.push(convs);
            cin = c;
        }
        Ok(Self { channels, stages })
    }
}

impl EncoderInterface for ToyEncoder {
    fn channels(&self) -> [usize; 4] {
        self.channels
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        pixels: Var,
    ) -> Result<[Var; 4]> {
        let s = tape.shape(pixels).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::invalid(format!(
                "encoder input must be [B, 3, H, W], got {s:?}"
            )));
        }
        check_geometry(s[2], s[3])?;
        let coords = tape.leaf(coord_planes(s[0], s[2], s[3]));
        let mut x = tape.concat(&[pixels, coords], 1)?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward(tape, reg, x)?;
            }
            out.push(x);
        }
        Ok(out.try_into().expect("four stages"))
    }
}

/// Per-scale projection to `d_t`, concatenation, and a fusing projection.
#[derive(Debug, Clone)]
pub struct MlpFusion {
    pub in_dims: [usize; 4],
    pub d_t: usize,
    proj: Vec<Linear>,
    fuse: Linear,
}

impl MlpFusion {
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        in_dims: [usize; 4],
        d_t: usize,
    ) -> Result<Self> {
        let proj = in_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(reg, &format!("{prefix}.proj{i}"), d, d_t))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Linear::new(reg, &format!("{prefix}.fuse"), 4 * d_t, d_t)?;
        Ok(Self {
            in_dims,
            d_t,
            proj,
            fuse,
        })
    }

    /// Scales `[B, D_i, h_i, w_i]` to face tokens `[B, h_0 w_0, d_t]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        scales: &[Var],
    ) -> Result<Var> {
        if scales.len() != 4 {
            return Err(Error::invalid(format!(
                "fusion expects 4 scales, got {}",
                scales.len()
            )));
        }
        let s0 = tape.shape(scales[0]).to_vec();
        if s0.len() != 4 {
            return Err(Error::shape("mlp_fusion", &s0, &[0, self.in_dims[0], 0, 0]));
        }
        let (b, h, w) = (s0[0], s0[2], s0[3]);
        let mut projected = Vec::with_capacity(4);
        for (i, (&s, lin)) in scales.iter().zip(&self.proj).enumerate() {
            let shape = tape.shape(s).to_vec();
            if shape.len() != 4 || shape[0] != b || shape[1] != self.in_dims[i] {
                return Err(Error::shape(
                    "mlp_fusion",
                    &shape,
                    &[b, self.in_dims[i], h, w],
                ));
            }
            let up = tape.bilinear_resize(s, h, w)?;
            let tokens = tape.permute(up, &[0, 2, 3, 1])?;
            let tokens = tape.reshape(tokens, &[b, h * w, self.in_dims[i]])?;
            projected.push(lin.forward(tape, reg, tokens)?);
        }
        let cat = tape.concat(&projected, -1)?;
        self.fuse.forward(tape, reg, cat)
    }
}

/// Parameter count of [`MlpFusion`] for the given dims.
pub fn fusion_param_count(in_dims: [usize; 4], d_t: usize) -> usize {
    in_dims.iter().map(|&d| d * d_t + d_t).sum::<usize>() + 4 * d_t * d_t + d_t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{check_param_grads, init_params};
    use crate::rng::Rng;
    use crate::tensor::gradcheck::check_tape_fn;

    fn encoder_shapes(h: usize, w: usize) -> Result<Vec<Vec<usize>>> {
        let mut reg = ParamRegistry::<f32>::new();
        let enc = ToyEncoder::new(&mut reg, "encoder", ToyEncoder::DEFAULT_CHANNELS)?;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, h, w]));
        let out = enc.forward(&mut tape, &reg, x)?;
        Ok(out.iter().map(|v| tape.shape(*v).to_vec()).collect())
    }

    #[test]
    fn encoder_stride_arithmetic() {
        assert_eq!(
            encoder_shapes(64, 64).unwrap(),
            vec![
                vec![1, 16, 16, 16],
                vec![1, 32, 8, 8],
                vec![1, 64, 4, 4],
                vec![1, 128, 2, 2]
            ]
        );
        let s = encoder_shapes(224, 224).unwrap();
        assert_eq!(s.iter().map(|s| s[2]).collect::<Vec<_>>(), [56, 28, 14, 7]);
        assert!(encoder_shapes(50, 64).is_err());
        assert!(ImageBatch::new(Tensor::<f32>::zeros(&[1, 3, 50, 64])).is_err());
        assert!(ImageBatch::new(Tensor::<f32>::full(&[1, 3, 32, 32], 1.5)).is_err());
        assert!(ImageBatch::new(Tensor::<f32>::full(&[2, 3, 32, 64], 0.5)).is_ok());
    }

    #[test]
    fn zero_scales_fuse_to_zero() {
        let mut reg = ParamRegistry::<f64>::new();
        let fusion = MlpFusion::new(&mut reg, "fusion", [3, 4, 5, 6], 4).unwrap();
        init_params(&mut reg, &mut Rng::new(1));
        let mut tape = Tape::new();
        let scales: Vec<Var> = [(3, 8), (4, 4), (5, 2), (6, 1)]
            .iter()
            .map(|&(c, s)| tape.leaf(Tensor::zeros(&[2, c, s, s])))
            .collect();
        let f = fusion.forward(&mut tape, &reg, &scales).unwrap();
        assert_eq!(tape.shape(f), &[2, 64, 4]);
        assert!(tape.value(f).iter().all(|&v| v == 0.0));
        assert!(fusion.forward(&mut tape, &reg, &scales[..3]).is_err());
        let bad = tape.leaf(Tensor::zeros(&[2, 7, 1, 1]));
        assert!(matches!(
            fusion.forward(&mut tape, &reg, &[scales[0], scales[1], scales[2], bad]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn hand_set_fusion() {
        // D_i = 2, D_t = 2, 2x2 stride-4 grid; coarser scales are 1x1 and upsample to constants.
        let mut reg = ParamRegistry::<f64>::new();
        let fusion = MlpFusion::new(&mut reg, "f", [2; 4], 2).unwrap();
        for i in 0..4 {
            let s = (i + 1) as f64;
            reg.set(&format!("f.proj{i}.weight"), vec![s, 0.0, 0.0, s])
                .unwrap();
            reg.set(&format!("f.proj{i}.bias"), vec![0.0, i as f64])
                .unwrap();
        }
        // fuse: out0 = sum of channel-0 entries, out1 = proj0 channel 1 only
        let mut fw = vec![0.0; 16];
        for i in 0..4 {
            fw[2 * i] = 1.0;
        }
        fw[8 + 1] = 1.0;
        reg.set("f.fuse.weight", fw).unwrap();
        reg.set("f.fuse.bias", vec![0.5, -0.5]).unwrap();

        let mut tape = Tape::new();
        let s0 = tape.leaf(
            Tensor::from_f64(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap(),
        );
        let s1 = tape.leaf(Tensor::from_f64(&[1, 2, 1, 1], &[1.0, 0.0]).unwrap());
        let s2 = tape.leaf(Tensor::from_f64(&[1, 2, 1, 1], &[-1.0, 0.0]).unwrap());
        let s3 = tape.leaf(Tensor::from_f64(&[1, 2, 1, 1], &[2.0, 0.0]).unwrap());
        let f = fusion.forward(&mut tape, &reg, &[s0, s1, s2, s3]).unwrap();
        // channel 0: x0 + 2*1 + 3*(-1) + 4*2 + 0.5 = x0 + 7.5; channel 1: y0 - 0.5
        let want = [8.5, 9.5, 9.5, 19.5, 10.5, 29.5, 11.5, 39.5];
        assert_eq!(tape.value(f), &want);
    }

    #[test]
    fn fusion_is_equivariant_to_spatial_permutation() {
        let mut reg = ParamRegistry::<f64>::new();
        let fusion = MlpFusion::new(&mut reg, "fusion", [2, 3, 2, 3], 4).unwrap();
        init_params(&mut reg, &mut Rng::new(2));
        let mut rng = Rng::new(3);
        let dims = [2, 3, 2, 3];
        let scales: Vec<Tensor<f64>> = dims
            .iter()
            .map(|&c| {
                let d: Vec<f64> = (0..c * 9).map(|_| rng.range(-1.0, 1.0)).collect();
                Tensor::from_f64(&[1, c, 3, 3], &d).unwrap()
            })
            .collect();
        let perm = [4, 0, 8, 2, 6, 1, 3, 7, 5];
        let permuted: Vec<Tensor<f64>> = scales
            .iter()
            .map(|s| {
                let c = s.shape()[1];
                let d: Vec<f64> = (0..c)
                    .flat_map(|ch| perm.iter().map(move |&p| (ch, p)))
                    .map(|(ch, p)| s.data()[ch * 9 + p])
                    .collect();
                Tensor::from_f64(&[1, c, 3, 3], &d).unwrap()
            })
            .collect();
        let mut tape = Tape::new();
        let a: Vec<Var> = scales.into_iter().map(|s| tape.leaf(s)).collect();
        let b: Vec<Var> = permuted.into_iter().map(|s| tape.leaf(s)).collect();
        let fa = fusion.forward(&mut tape, &reg, &a).unwrap();
        let fb = fusion.forward(&mut tape, &reg, &b).unwrap();
        let (fa, fb) = (tape.value(fa).to_vec(), tape.value(fb));
        for (row, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((fb[row * 4 + c] - fa[p * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_scale_fusion_count() {
        assert_eq!(fusion_param_count([128, 256, 512, 1024], 256), 754_944);
        let mut reg = ParamRegistry::<f32>::new();
        MlpFusion::new(&mut reg, "fusion", [16, 32, 64, 128], 32).unwrap();
        assert_eq!(
            reg.count("fusion."),
            fusion_param_count([16, 32, 64, 128], 32)
        );
    }

    #[test]
    fn encoder_and_fusion_pass_gradient_checks() {
        let mut reg = ParamRegistry::<f64>::new();
        let channels = [3, 4, 4, 5];
        let enc = ToyEncoder::new(&mut reg, "encoder", channels).unwrap();
        let fusion = MlpFusion::new(&mut reg, "fusion", channels, 4).unwrap();
        init_params(&mut reg, &mut Rng::new(4));
        let mut rng = Rng::new(5);
        let px: Vec<f64> = (0..2 * 3 * 32 * 32).map(|_| rng.uniform()).collect();
        let pixels = Tensor::from_f64(&[2, 3, 32, 32], &px).unwrap();
        let weights: Vec<f64> = (0..2 * 64 * 4)
            .map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.4)
            .collect();
        let f = |tape: &mut Tape<f64>, reg: &ParamRegistry<f64>, x: Var| -> Result<Var> {
            let scales = enc.forward(tape, reg, x)?;
            let y = fusion.forward(tape, reg, &scales)?;
            let w = tape.constant_f64(&[2, 64, 4], &weights)?;
            let y = tape.mul(y, w)?;
            tape.sum(y, None)
        };
        for (name, worst) in check_param_grads(&reg, 12, |tape, reg| {
            let x = tape.leaf(pixels.clone());
            f(tape, reg, x)
        })
        .unwrap()
        {
            assert!(worst < 1e-4, "{name}: {worst}");
        }
        let worst =
            check_tape_fn(&[pixels.clone().with_grad()], |tape, v| f(tape, &reg, v[0])).unwrap();
        assert!(worst[0] < 1e-4, "pixels: {}", worst[0]);
    }
}
