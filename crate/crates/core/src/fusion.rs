//! Cross-encoder bilinear fusion.
//!
//! Channel vectors are hashed into a fixed sketch space (count sketch), where
//! circular convolution of two sketches equals the sketch of their outer
//! product. Fusing the expression skip, the identity skip, and the decoder
//! stream therefore takes two convolutions; signed square root and L2
//! normalization condition the result before a 1x1 convolution maps it back
//! to the decoder width. Sketch coefficients are drawn once from a recorded
//! seed and never trained.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{NodeId, SketchCoeffs, Tape, Tensor};
use crate::error::{Error, Result};

/// Smoothing added under the square root so its gradient is finite at 0.
pub const SIGNED_SQRT_EPS: f64 = 1e-8;
/// Lower clamp on the per-pixel norm in the L2 normalization step.
pub const L2_NORM_CLAMP: f64 = 1e-12;

/// Frozen count-sketch parameters: a hash bucket and a sign per channel.
#[derive(Clone, Debug)]
pub struct SketchParams {
    coeffs: Arc<SketchCoeffs>,
    seed: u64,
}

impl SketchParams {
    /// Draw hash/sign arrays for `channels` inputs into `d_out` buckets.
    /// The draw is fully determined by `seed`.
    pub fn draw(channels: usize, d_out: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let hash = (0..channels).map(|_| rng.gen_range(0..d_out)).collect();
        let sign = (0..channels)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Self {
            coeffs: Arc::new(SketchCoeffs { d_out, hash, sign }),
            seed,
        }
    }

    /// Build from explicit arrays (tests, identity sketches).
    pub fn from_parts(hash: Vec<usize>, sign: Vec<f64>, d_out: usize, seed: u64) -> Result<Self> {
        if hash.len() != sign.len() {
            return Err(Error::Dim("hash and sign arrays must have equal length".into()));
        }
        if let Some(&bad) = hash.iter().find(|&&h| h >= d_out) {
            return Err(Error::Contract(format!(
                "hash bucket {bad} out of range for d_out {d_out}"
            )));
        }
        if sign.iter().any(|s| s.abs() != 1.0) {
            return Err(Error::Contract("signs must be +1 or -1".into()));
        }
        Ok(Self {
            coeffs: Arc::new(SketchCoeffs { d_out, hash, sign }),
            seed,
        })
    }

    pub fn d_out(&self) -> usize {
        self.coeffs.d_out
    }

    pub fn channels(&self) -> usize {
        self.coeffs.hash.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hash(&self) -> &[usize] {
        &self.coeffs.hash
    }

    pub fn sign(&self) -> &[f64] {
        &self.coeffs.sign
    }

    pub fn coeffs(&self) -> Arc<SketchCoeffs> {
        Arc::clone(&self.coeffs)
    }
}

/// One fusion site: sketches for the two encoder skips and the decoder
/// stream, plus the 1x1 convolution back to the decoder width.
#[derive(Clone, Debug)]
pub struct CebModule {
    pub sketch_exp: SketchParams,
    pub sketch_id: SketchParams,
    pub sketch_dec: SketchParams,
    /// `[C_dec, d_out, 1, 1]`
    pub post_w: Tensor,
    /// `[C_dec]`
    pub post_b: Tensor,
}

impl CebModule {
    pub fn validate(&self) -> Result<()> {
        let d = self.sketch_exp.d_out();
        if self.sketch_id.d_out() != d || self.sketch_dec.d_out() != d {
            return Err(Error::Dim("all sketches in a fusion module must share d_out".into()));
        }
        if self.post_w.shape().len() != 4 || self.post_w.shape()[1] != d {
            return Err(Error::Dim(format!(
                "post conv weight must be [C_dec, {d}, 1, 1], got {:?}",
                self.post_w.shape()
            )));
        }
        Ok(())
    }
}

/// Value-level count sketch of a channel vector.
pub fn count_sketch(v: &Tensor, params: &SketchParams) -> Result<Tensor> {
    if v.shape().len() != 1 || v.shape()[0] != params.channels() {
        return Err(Error::Dim(format!(
            "count_sketch expects [{}] input, got {:?}",
            params.channels(),
            v.shape()
        )));
    }
    let mut tape = Tape::new();
    let vid = tape.constant(v.clone());
    let out = tape.count_sketch(vid, params.coeffs())?;
    Ok(tape.value(out).clone())
}

/// Sketch both vectors and circularly convolve the sketches; this equals the
/// count sketch of the outer product `u (x) v` under the induced pair hash.
pub fn compact_bilinear_on(
    tape: &mut Tape,
    u: NodeId,
    v: NodeId,
    pu: &SketchParams,
    pv: &SketchParams,
) -> Result<NodeId> {
    if pu.d_out() != pv.d_out() {
        return Err(Error::Dim("compact_bilinear sketches must share d_out".into()));
    }
    let su = tape.count_sketch(u, pu.coeffs())?;
    let sv = tape.count_sketch(v, pv.coeffs())?;
    tape.circular_convolve(su, sv)
}

/// Value-level compact bilinear pooling of two vectors.
pub fn compact_bilinear(
    u: &Tensor,
    v: &Tensor,
    pu: &SketchParams,
    pv: &SketchParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (ui, vi) = (tape.constant(u.clone()), tape.constant(v.clone()));
    let out = compact_bilinear_on(&mut tape, ui, vi, pu, pv)?;
    Ok(tape.value(out).clone())
}

/// Tape handles for one fusion site.
#[derive(Clone, Debug)]
pub struct CebNodes {
    pub sketch_exp: Arc<SketchCoeffs>,
    pub sketch_id: Arc<SketchCoeffs>,
    pub sketch_dec: Arc<SketchCoeffs>,
    pub post_w: NodeId,
    pub post_b: NodeId,
}

impl CebNodes {
    pub fn constants(tape: &mut Tape, m: &CebModule) -> Self {
        Self {
            sketch_exp: m.sketch_exp.coeffs(),
            sketch_id: m.sketch_id.coeffs(),
            sketch_dec: m.sketch_dec.coeffs(),
            post_w: tape.constant(m.post_w.clone()),
            post_b: tape.constant(m.post_b.clone()),
        }
    }
}

/// Per-pixel fusion of decoder features with both encoders' skip features.
///
/// The expression/identity vectors fuse first; their fused sketch is already
/// in sketch space, so fusing with the decoder stream is one more circular
/// convolution against the decoder's sketch. Signed sqrt and L2 normalization
/// over channels precede the 1x1 convolution back to `C_dec`.
pub fn ceb_fuse_on(
    tape: &mut Tape,
    dec_feat: NodeId,
    exp_feat: NodeId,
    id_feat: NodeId,
    nodes: &CebNodes,
) -> Result<NodeId> {
    let dshape = tape.value(dec_feat).shape().to_vec();
    let eshape = tape.value(exp_feat).shape().to_vec();
    let ishape = tape.value(id_feat).shape().to_vec();
    if dshape.len() != 3 || eshape.len() != 3 || ishape.len() != 3 {
        return Err(Error::Dim("ceb_fuse expects [C, H, W] feature maps".into()));
    }
    if dshape[1..] != eshape[1..] || dshape[1..] != ishape[1..] {
        return Err(Error::Dim(format!(
            "ceb_fuse resolution mismatch: dec {:?}, exp {:?}, id {:?}",
            &dshape[1..],
            &eshape[1..],
            &ishape[1..]
        )));
    }
    let s_exp = tape.count_sketch(exp_feat, Arc::clone(&nodes.sketch_exp))?;
    let s_id = tape.count_sketch(id_feat, Arc::clone(&nodes.sketch_id))?;
    let enc_pair = tape.circular_convolve(s_exp, s_id)?;
    let s_dec = tape.count_sketch(dec_feat, Arc::clone(&nodes.sketch_dec))?;
    let fused = tape.circular_convolve(enc_pair, s_dec)?;
    let rooted = tape.signed_sqrt(fused, SIGNED_SQRT_EPS)?;
    let normed = tape.l2_normalize_channels(rooted, L2_NORM_CLAMP)?;
    tape.conv2d(normed, nodes.post_w, nodes.post_b, 1, 0)
}

/// Value-level fusion.
pub fn ceb_fuse(
    dec_feat: &Tensor,
    exp_feat: &Tensor,
    id_feat: &Tensor,
    module: &CebModule,
) -> Result<Tensor> {
    module.validate()?;
    let mut tape = Tape::new();
    let d = tape.constant(dec_feat.clone());
    let e = tape.constant(exp_feat.clone());
    let i = tape.constant(id_feat.clone());
    let nodes = CebNodes::constants(&mut tape, module);
    let out = ceb_fuse_on(&mut tape, d, e, i, &nodes)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck_multi;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_sketch_is_identity() {
        let c = 6;
        let p = SketchParams::from_parts((0..c).collect(), vec![1.0; c], c, 0).unwrap();
        let mut r = rng(1);
        let v = Tensor::rand_uniform(&[c], -1.0, 1.0, &mut r);
        let out = count_sketch(&v, &p).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn zero_vector_sketches_to_zero() {
        let p = SketchParams::draw(8, 4, 3);
        let out = count_sketch(&Tensor::zeros(&[8]), &p).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sketch_matches_scatter_add_oracle() {
        let mut r = rng(2);
        let (c, d) = (16, 8);
        let p = SketchParams::draw(c, d, 7);
        let v = Tensor::rand_uniform(&[c], -1.0, 1.0, &mut r);
        let got = count_sketch(&v, &p).unwrap();
        let mut want = vec![0.0; d];
        for j in 0..c {
            want[p.hash()[j]] += p.sign()[j] * v.data()[j];
        }
        assert_eq!(got.data(), want.as_slice());
    }

    #[test]
    fn sketch_draw_is_reproducible() {
        let a = SketchParams::draw(64, 512, 99);
        let b = SketchParams::draw(64, 512, 99);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.sign(), b.sign());
        let c = SketchParams::draw(64, 512, 100);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn compact_bilinear_of_zeros_is_zero() {
        let pu = SketchParams::draw(4, 8, 1);
        let pv = SketchParams::draw(6, 8, 2);
        let out = compact_bilinear(&Tensor::zeros(&[4]), &Tensor::zeros(&[6]), &pu, &pv).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn collision_free_pair_hash_recovers_outer_product() {
        // d_out = C1*C2 with h_u[i] = i*C2 and h_v[j] = j makes the induced
        // pair hash (h_u[i]+h_v[j]) mod d_out a bijection onto 0..d_out.
        let (c1, c2) = (3, 4);
        let d = c1 * c2;
        let mut r = rng(3);
        let su: Vec<f64> = (0..c1).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let sv: Vec<f64> = (0..c2).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let pu =
            SketchParams::from_parts((0..c1).map(|i| i * c2).collect(), su.clone(), d, 0).unwrap();
        let pv = SketchParams::from_parts((0..c2).collect(), sv.clone(), d, 0).unwrap();
        let u = Tensor::rand_uniform(&[c1], -1.0, 1.0, &mut r);
        let v = Tensor::rand_uniform(&[c2], -1.0, 1.0, &mut r);
        let fused = compact_bilinear(&u, &v, &pu, &pv).unwrap();
        for i in 0..c1 {
            for j in 0..c2 {
                let k = (i * c2 + j) % d;
                let want = su[i] * sv[j] * u.data()[i] * v.data()[j];
                assert!(
                    (fused.data()[k] - want).abs() < 1e-9,
                    "bucket {k}: got {} want {want}",
                    fused.data()[k]
                );
            }
        }
    }

    #[test]
    fn compact_bilinear_equals_direct_convolution_oracle() {
        let mut r = rng(4);
        let (c1, c2, d) = (10, 12, 16);
        let pu = SketchParams::draw(c1, d, 11);
        let pv = SketchParams::draw(c2, d, 12);
        let u = Tensor::rand_uniform(&[c1], -1.0, 1.0, &mut r);
        let v = Tensor::rand_uniform(&[c2], -1.0, 1.0, &mut r);
        let got = compact_bilinear(&u, &v, &pu, &pv).unwrap();
        let su = count_sketch(&u, &pu).unwrap();
        let sv = count_sketch(&v, &pv).unwrap();
        let mut want = vec![0.0; d];
        for k in 0..d {
            for j in 0..d {
                want[k] += su.data()[j] * sv.data()[(k + d - j) % d];
            }
        }
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn bilinearity_in_each_argument() {
        let mut r = rng(5);
        let (c, d) = (8, 16);
        let pu = SketchParams::draw(c, d, 21);
        let pv = SketchParams::draw(c, d, 22);
        let u = Tensor::rand_uniform(&[c], -1.0, 1.0, &mut r);
        let v = Tensor::rand_uniform(&[c], -1.0, 1.0, &mut r);
        let base = compact_bilinear(&u, &v, &pu, &pv).unwrap();

        // scaling by a power of two commutes with every fp operation involved
        let u2 = Tensor::new(vec![c], u.data().iter().map(|x| 2.0 * x).collect()).unwrap();
        let got = compact_bilinear(&u2, &v, &pu, &pv).unwrap();
        for (g, b) in got.data().iter().zip(base.data()) {
            assert_eq!(*g, 2.0 * b);
        }

        // additivity holds to roundoff
        let w = Tensor::rand_uniform(&[c], -1.0, 1.0, &mut r);
        let uw = Tensor::new(
            vec![c],
            u.data().iter().zip(w.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let lhs = compact_bilinear(&uw, &v, &pu, &pv).unwrap();
        let cb_w = compact_bilinear(&w, &v, &pu, &pv).unwrap();
        for ((l, b), extra) in lhs.data().iter().zip(base.data()).zip(cb_w.data()) {
            assert!((l - (b + extra)).abs() < 1e-12);
        }
    }

    #[test]
    fn sketch_inner_products_are_unbiased() {
        // Mean of <sketch(u), sketch(v)> over independent draws approximates
        // <u, v>; 200 draws at d_out=512, C=64 lands within 5%.
        let (c, d, draws) = (64, 512, 200);
        let mut r = rng(6);
        let u = Tensor::rand_uniform(&[c], -1.0, 1.0, &mut r);
        let v = Tensor::new(
            vec![c],
            u.data()
                .iter()
                .map(|x| 0.8 * x + 0.6 * r.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let true_dot: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let mut mean = 0.0;
        for i in 0..draws {
            let p = SketchParams::draw(c, d, 1000 + i as u64);
            let su = count_sketch(&u, &p).unwrap();
            let sv = count_sketch(&v, &p).unwrap();
            mean += su
                .data()
                .iter()
                .zip(sv.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        mean /= draws as f64;
        let rel = (mean - true_dot).abs() / true_dot.abs();
        assert!(rel < 0.05, "relative error {rel} (mean {mean}, true {true_dot})");
    }

    fn small_module(c_dec: usize, c_e: usize, c_i: usize, d: usize, r: &mut ChaCha8Rng) -> CebModule {
        let bound = 1.0 / (d as f64).sqrt();
        CebModule {
            sketch_exp: SketchParams::draw(c_e, d, 31),
            sketch_id: SketchParams::draw(c_i, d, 32),
            sketch_dec: SketchParams::draw(c_dec, d, 33),
            post_w: Tensor::rand_uniform(&[c_dec, d, 1, 1], -bound, bound, r),
            post_b: Tensor::rand_uniform(&[c_dec], -0.5, 0.5, r),
        }
    }

    #[test]
    fn zero_inputs_give_bias_map() {
        let mut r = rng(7);
        let m = small_module(3, 4, 5, 8, &mut r);
        let out = ceb_fuse(
            &Tensor::zeros(&[3, 2, 2]),
            &Tensor::zeros(&[4, 2, 2]),
            &Tensor::zeros(&[5, 2, 2]),
            &m,
        )
        .unwrap();
        for ch in 0..3 {
            for p in 0..4 {
                assert!((out.data()[ch * 4 + p] - m.post_b.data()[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_is_pixel_independent() {
        let mut r = rng(8);
        let m = small_module(3, 4, 4, 8, &mut r);
        let dec = Tensor::rand_uniform(&[3, 2, 2], -1.0, 1.0, &mut r);
        let exp = Tensor::rand_uniform(&[4, 2, 2], -1.0, 1.0, &mut r);
        let idf = Tensor::rand_uniform(&[4, 2, 2], -1.0, 1.0, &mut r);
        let base = ceb_fuse(&dec, &exp, &idf, &m).unwrap();

        // permute the four pixel positions identically in all inputs
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor| {
            let c = t.shape()[0];
            let mut data = vec![0.0; t.numel()];
            for ch in 0..c {
                for (dst, &src) in perm.iter().enumerate() {
                    data[ch * 4 + dst] = t.data()[ch * 4 + src];
                }
            }
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let got = ceb_fuse(&permute(&dec), &permute(&exp), &permute(&idf), &m).unwrap();
        let want = permute(&base);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn single_pixel_fusion_reduces_to_vector_pipeline() {
        let mut r = rng(9);
        let m = small_module(3, 4, 5, 8, &mut r);
        let dec = Tensor::rand_uniform(&[3, 1, 1], -1.0, 1.0, &mut r);
        let exp = Tensor::rand_uniform(&[4, 1, 1], -1.0, 1.0, &mut r);
        let idf = Tensor::rand_uniform(&[5, 1, 1], -1.0, 1.0, &mut r);
        let got = ceb_fuse(&dec, &exp, &idf, &m).unwrap();

        // independent vector-level recomputation
        let ev = Tensor::new(vec![4], exp.data().to_vec()).unwrap();
        let iv = Tensor::new(vec![5], idf.data().to_vec()).unwrap();
        let dv = Tensor::new(vec![3], dec.data().to_vec()).unwrap();
        let enc = compact_bilinear(&ev, &iv, &m.sketch_exp, &m.sketch_id).unwrap();
        let sd = count_sketch(&dv, &m.sketch_dec).unwrap();
        let fused = crate::autodiff::ops::circular_convolve(&enc, &sd).unwrap();
        let rooted: Vec<f64> = fused
            .data()
            .iter()
            .map(|&x| x.signum() * (x.abs() + SIGNED_SQRT_EPS).sqrt())
            .collect();
        let norm = rooted.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_CLAMP);
        let normed: Vec<f64> = rooted.iter().map(|v| v / norm).collect();
        for ch in 0..3 {
            let mut acc = m.post_b.data()[ch];
            for j in 0..8 {
                acc += m.post_w.data()[ch * 8 + j] * normed[j];
            }
            assert!((got.data()[ch] - acc).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_rejects_resolution_mismatch() {
        let mut r = rng(10);
        let m = small_module(3, 4, 4, 8, &mut r);
        let out = ceb_fuse(
            &Tensor::zeros(&[3, 2, 2]),
            &Tensor::zeros(&[4, 3, 3]),
            &Tensor::zeros(&[4, 2, 2]),
            &m,
        );
        assert!(matches!(out, Err(Error::Dim(_))));
    }

    #[test]
    fn ceb_gradcheck_through_full_pipeline() {
        let mut r = rng(11);
        let m = small_module(3, 4, 4, 8, &mut r);
        let dec = Tensor::rand_uniform(&[3, 2, 2], -1.0, 1.0, &mut r);
        let exp = Tensor::rand_uniform(&[4, 2, 2], -1.0, 1.0, &mut r);
        let idf = Tensor::rand_uniform(&[4, 2, 2], -1.0, 1.0, &mut r);
        let inputs = vec![dec, exp, idf, m.post_w.clone(), m.post_b.clone()];
        let builder = |tape: &mut Tape, ids: &[NodeId]| {
            let nodes = CebNodes {
                sketch_exp: m.sketch_exp.coeffs(),
                sketch_id: m.sketch_id.coeffs(),
                sketch_dec: m.sketch_dec.coeffs(),
                post_w: ids[3],
                post_b: ids[4],
            };
            let out = ceb_fuse_on(tape, ids[0], ids[1], ids[2], &nodes)?;
            let sq = tape.square(out)?;
            tape.sum(sq)
        };
        let err = gradcheck_multi(&builder, &inputs, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
