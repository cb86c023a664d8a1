//! Token-grid bookkeeping: patch embedding, pixel-(un)shuffle rearrangements,
//! nearest-neighbor upsampling, and 2D rotary position tables.
//!
//! Token order is row-major over (row, col) and fixed everywhere in the
//! repository; teacher features must be produced in the same order because
//! the alignment losses match token n to token n.
//!
//! The rearrangements are exposed two ways: as plain functions on
//! [`TokenGrid`] values, and as flat per-sample index maps consumed by
//! [`Tape::gather`](crate::autodiff::Tape::gather) when the same movement has
//! to be differentiable.

use crate::autodiff::{rope_rotate_raw, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, IxDyn};
use std::sync::Arc;

/// A batch of spatial tokens: `data` is `[batch, height·width, channels]`
/// with row-major token order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T: Scalar> {
    data: Array3<T>,
    height: usize,
    width: usize,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(data: Array3<T>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "grid extents must be >= 1, got {height}x{width}"
            )));
        }
        if data.shape()[1] != height * width {
            return Err(Error::ShapeMismatch(format!(
                "token count {} != {height}x{width}",
                data.shape()[1]
            )));
        }
        Ok(TokenGrid { data, height, width })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn tokens(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &Array3<T> {
        &self.data
    }
    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn cast<U: Scalar>(&self) -> TokenGrid<U> {
        TokenGrid {
            data: self.data.mapv(|v| U::from_f64(v.to_f64())),
            height: self.height,
            width: self.width,
        }
    }
}

/// A differentiable token grid: a tape node of shape `[B, N, C]` plus the
/// spatial factorization of N.
#[derive(Debug, Clone, Copy)]
pub struct GridVar {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

impl GridVar {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

// ---- flat per-sample index maps ----

/// Apply a per-sample flat index map: `out[b][j] = x[b][idx[j]]`.
pub fn apply_sample_map<T: Scalar>(
    x: &ArrayD<T>,
    idx: &[usize],
    out_inner_shape: &[usize],
) -> ArrayD<T> {
    let b = x.shape()[0];
    let in_inner: usize = x.shape()[1..].iter().product();
    let out_inner: usize = out_inner_shape.iter().product();
    assert_eq!(idx.len(), out_inner);
    let mut out_shape = vec![b];
    out_shape.extend_from_slice(out_inner_shape);
    let mut out = ArrayD::zeros(IxDyn(&out_shape));
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        let src = &xs[bi * in_inner..(bi + 1) * in_inner];
        let dst = &mut os[bi * out_inner..(bi + 1) * out_inner];
        for (j, &s) in idx.iter().enumerate() {
            dst[j] = src[s];
        }
    }
    out
}

/// Index map for pixel unshuffle on a `[h·w, c]` token layout: an `h×w×c`
/// grid becomes `(h/r)×(w/r)` tokens of `c·r²` channels, with output channel
/// `c·r² + dr·r + dc` taking the value at spatial offset `(dr, dc)`.
pub fn pixel_unshuffle_map(h: usize, w: usize, c: usize, r: usize) -> (Vec<usize>, Vec<usize>) {
    assert!(r >= 1 && h % r == 0 && w % r == 0);
    let (ho, wo) = (h / r, w / r);
    let co = c * r * r;
    let mut idx = vec![0usize; ho * wo * co];
    for gr in 0..ho {
        for gc in 0..wo {
            for ci in 0..c {
                for dr in 0..r {
                    for dc in 0..r {
                        let out_tok = gr * wo + gc;
                        let out_ch = ci * r * r + dr * r + dc;
                        let in_tok = (gr * r + dr) * w + (gc * r + dc);
                        idx[out_tok * co + out_ch] = in_tok * c + ci;
                    }
                }
            }
        }
    }
    (idx, vec![ho * wo, co])
}

/// Inverse of [`pixel_unshuffle_map`]: `(h·r)×(w·r)` tokens of `c/r²` channels.
pub fn pixel_shuffle_map(h: usize, w: usize, c: usize, r: usize) -> (Vec<usize>, Vec<usize>) {
    assert!(r >= 1 && c % (r * r) == 0);
    let (ho, wo) = (h * r, w * r);
    let co = c / (r * r);
    let mut idx = vec![0usize; ho * wo * co];
    for gr in 0..h {
        for gc in 0..w {
            for co_i in 0..co {
                for dr in 0..r {
                    for dc in 0..r {
                        let out_tok = (gr * r + dr) * wo + (gc * r + dc);
                        let in_ch = co_i * r * r + dr * r + dc;
                        idx[out_tok * co + co_i] = (gr * w + gc) * c + in_ch;
                    }
                }
            }
        }
    }
    (idx, vec![ho * wo, co])
}

/// Each token replicated into an `r×r` block; channels unchanged.
pub fn nearest_upsample_map(h: usize, w: usize, c: usize, r: usize) -> (Vec<usize>, Vec<usize>) {
    assert!(r >= 1);
    let (ho, wo) = (h * r, w * r);
    let mut idx = vec![0usize; ho * wo * c];
    for orow in 0..ho {
        for ocol in 0..wo {
            let in_tok = (orow / r) * w + (ocol / r);
            for ci in 0..c {
                idx[(orow * wo + ocol) * c + ci] = in_tok * c + ci;
            }
        }
    }
    (idx, vec![ho * wo, c])
}

/// Rearrange `[c_in, H, W]` image samples into `[N, p²·c_in]` patch vectors,
/// patch-major row-major, with vector ordering `(c_in, dr, dc)`.
pub fn patchify_map(c_in: usize, h_img: usize, w_img: usize, p: usize) -> (Vec<usize>, Vec<usize>) {
    assert!(p >= 1 && h_img % p == 0 && w_img % p == 0);
    let (gh, gw) = (h_img / p, w_img / p);
    let k = p * p * c_in;
    let mut idx = vec![0usize; gh * gw * k];
    for gr in 0..gh {
        for gc in 0..gw {
            let tok = gr * gw + gc;
            for ci in 0..c_in {
                for dr in 0..p {
                    for dc in 0..p {
                        let j = ci * p * p + dr * p + dc;
                        let pix = (gr * p + dr) * w_img + (gc * p + dc);
                        idx[tok * k + j] = ci * h_img * w_img + pix;
                    }
                }
            }
        }
    }
    (idx, vec![gh * gw, k])
}

/// Inverse of [`patchify_map`]: `[N, p²·c_out]` token vectors back to a
/// `[c_out, H, W]` image.
pub fn unpatchify_map(
    c_out: usize,
    h_img: usize,
    w_img: usize,
    p: usize,
) -> (Vec<usize>, Vec<usize>) {
    assert!(p >= 1 && h_img % p == 0 && w_img % p == 0);
    let gw = w_img / p;
    let k = p * p * c_out;
    let mut idx = vec![0usize; c_out * h_img * w_img];
    for ci in 0..c_out {
        for row in 0..h_img {
            for col in 0..w_img {
                let (gr, dr) = (row / p, row % p);
                let (gc, dc) = (col / p, col % p);
                let tok = gr * gw + gc;
                let j = ci * p * p + dr * p + dc;
                idx[ci * h_img * w_img + row * w_img + col] = tok * k + j;
            }
        }
    }
    (idx, vec![c_out, h_img, w_img])
}

// ---- plain grid operations ----

fn grid_sample_map<T: Scalar>(
    grid: &TokenGrid<T>,
    map: (Vec<usize>, Vec<usize>),
    out_h: usize,
    out_w: usize,
) -> TokenGrid<T> {
    let (idx, out_shape) = map;
    let out = apply_sample_map(&grid.data.clone().into_dyn(), &idx, &out_shape);
    let out3 = out.into_dimensionality::<ndarray::Ix3>().unwrap();
    TokenGrid { data: out3, height: out_h, width: out_w }
}

/// Space-to-depth: `h×w×c` to `(h/r)×(w/r)×(c·r²)`.
pub fn pixel_unshuffle<T: Scalar>(grid: &TokenGrid<T>, r: usize) -> Result<TokenGrid<T>> {
    if r == 0 {
        return Err(Error::Config("shuffle factor must be >= 1".into()));
    }
    if grid.height % r != 0 || grid.width % r != 0 {
        return Err(Error::ShapeMismatch(format!(
            "grid {}x{} not divisible by factor {r}",
            grid.height, grid.width
        )));
    }
    let map = pixel_unshuffle_map(grid.height, grid.width, grid.channels(), r);
    Ok(grid_sample_map(grid, map, grid.height / r, grid.width / r))
}

/// Depth-to-space: `h×w×c` to `(h·r)×(w·r)×(c/r²)`.
pub fn pixel_shuffle<T: Scalar>(grid: &TokenGrid<T>, r: usize) -> Result<TokenGrid<T>> {
    if r == 0 {
        return Err(Error::Config("shuffle factor must be >= 1".into()));
    }
    if grid.channels() % (r * r) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "channels {} not divisible by r² = {}",
            grid.channels(),
            r * r
        )));
    }
    let map = pixel_shuffle_map(grid.height, grid.width, grid.channels(), r);
    Ok(grid_sample_map(grid, map, grid.height * r, grid.width * r))
}

/// Replicate every token into an `r×r` block.
pub fn nearest_upsample<T: Scalar>(grid: &TokenGrid<T>, r: usize) -> Result<TokenGrid<T>> {
    if r == 0 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let map = nearest_upsample_map(grid.height, grid.width, grid.channels(), r);
    Ok(grid_sample_map(grid, map, grid.height * r, grid.width * r))
}

/// Patch-embed an image batch `[B, C, H, W]` into a token grid via a linear
/// map `w: [p²·C, channels]` (plus optional bias), non-differentiable path.
pub fn patchify<T: Scalar>(
    image: &Array4<T>,
    patch: usize,
    w: &Array2<T>,
    bias: Option<&Array1<T>>,
) -> Result<TokenGrid<T>> {
    let (_b, c_in, h_img, w_img) = image.dim();
    if patch == 0 || h_img % patch != 0 || w_img % patch != 0 {
        return Err(Error::ShapeMismatch(format!(
            "image {h_img}x{w_img} not divisible by patch {patch}"
        )));
    }
    let k = patch * patch * c_in;
    if w.nrows() != k {
        return Err(Error::ShapeMismatch(format!(
            "patch embed expects weight rows {k}, got {}",
            w.nrows()
        )));
    }
    let (idx, out_shape) = patchify_map(c_in, h_img, w_img, patch);
    let patches = apply_sample_map(&image.clone().into_dyn(), &idx, &out_shape);
    let b = image.dim().0;
    let n = out_shape[0];
    let flat = patches.into_shape_with_order((b * n, k)).unwrap();
    let mut out = crate::autodiff::par_mat_mul(&flat.view(), &w.view(), T::one());
    if let Some(bv) = bias {
        out += bv;
    }
    let data = out
        .into_shape_with_order((b, n, w.ncols()))
        .unwrap();
    TokenGrid::new(data, h_img / patch, w_img / patch)
}

/// Rebuild an image batch from per-token `p²·c_out` vectors (the inverse
/// rearrangement of [`patchify`] for an identity embedding).
pub fn unpatchify<T: Scalar>(grid: &TokenGrid<T>, patch: usize, c_out: usize) -> Result<Array4<T>> {
    let k = patch * patch * c_out;
    if grid.channels() != k {
        return Err(Error::ShapeMismatch(format!(
            "unpatchify expects {k} channels, got {}",
            grid.channels()
        )));
    }
    let h_img = grid.height * patch;
    let w_img = grid.width * patch;
    let (idx, out_shape) = unpatchify_map(c_out, h_img, w_img, patch);
    let out = apply_sample_map(&grid.data.clone().into_dyn(), &idx, &out_shape);
    Ok(out.into_dimensionality::<ndarray::Ix4>().unwrap())
}

// ---- rotary tables ----

/// Precomputed 2D axial rotary angles. The head dimension splits in half
/// (rows, then columns); each half holds NeoX-style rotation pairs at
/// distance `head_dim/4`, with frequency `base^(−2k/(head_dim/2))` for pair
/// index k. Angles are computed in f64 and narrowed once.
#[derive(Debug, Clone)]
pub struct RopeTable<T: Scalar> {
    max_pos: usize,
    head_dim: usize,
    cos: Arc<Array2<T>>,
    sin: Arc<Array2<T>>,
}

impl<T: Scalar> RopeTable<T> {
    pub const BASE: f64 = 10_000.0;

    pub fn new(max_pos: usize, head_dim: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "rope head dim must be a positive multiple of 4, got {head_dim}"
            )));
        }
        if max_pos == 0 {
            return Err(Error::Config("rope table needs at least one position".into()));
        }
        let quarter = head_dim / 4;
        let axis_dim = (head_dim / 2) as f64;
        let mut cos = Array2::<T>::zeros((max_pos, quarter));
        let mut sin = Array2::<T>::zeros((max_pos, quarter));
        for p in 0..max_pos {
            for k in 0..quarter {
                let freq = Self::BASE.powf(-2.0 * k as f64 / axis_dim);
                let theta = p as f64 * freq;
                cos[[p, k]] = T::from_f64(theta.cos());
                sin[[p, k]] = T::from_f64(theta.sin());
            }
        }
        Ok(RopeTable {
            max_pos,
            head_dim,
            cos: Arc::new(cos),
            sin: Arc::new(sin),
        })
    }

    pub fn max_pos(&self) -> usize {
        self.max_pos
    }
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
    pub fn cos(&self) -> Arc<Array2<T>> {
        self.cos.clone()
    }
    pub fn sin(&self) -> Arc<Array2<T>> {
        self.sin.clone()
    }

    /// Plain (non-tape) rotation of `[M, N, head_dim]` for an `h×w` grid.
    pub fn apply(&self, x: &ArrayD<T>, h: usize, w: usize) -> Result<ArrayD<T>> {
        if x.shape().last() != Some(&self.head_dim) {
            return Err(Error::ShapeMismatch(format!(
                "rope expects head dim {}, got {:?}",
                self.head_dim,
                x.shape()
            )));
        }
        if h.max(w) > self.max_pos {
            return Err(Error::OutOfRange(format!(
                "grid {h}x{w} exceeds rope table max position {}",
                self.max_pos
            )));
        }
        Ok(rope_rotate_raw(x, &self.cos, &self.sin, h, w, false))
    }

    /// Tape rotation of a `[M, N, head_dim]` node.
    pub fn apply_var(&self, tape: &Tape<T>, x: Var, h: usize, w: usize) -> Var {
        assert!(h.max(w) <= self.max_pos, "grid exceeds rope table");
        tape.rope(x, self.cos.clone(), self.sin.clone(), h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn rand_grid(rng: &mut SeededRng, b: usize, h: usize, w: usize, c: usize) -> TokenGrid<f64> {
        let mut d = Array3::<f64>::zeros((b, h * w, c));
        for v in d.iter_mut() {
            *v = rng.normal_f64();
        }
        TokenGrid::new(d, h, w).unwrap()
    }

    #[test]
    fn token_grid_validates_extent() {
        let d = Array3::<f64>::zeros((1, 6, 2));
        assert!(TokenGrid::new(d.clone(), 2, 3).is_ok());
        assert!(TokenGrid::new(d.clone(), 3, 3).is_err());
        assert!(TokenGrid::new(d, 0, 6).is_err());
    }

    #[test]
    fn unshuffle_shapes_and_ordering() {
        // 2x2 grid, 1 channel, values laid out row-major.
        let d = Array3::from_shape_vec((1, 4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = TokenGrid::new(d, 2, 2).unwrap();
        let u = pixel_unshuffle(&g, 2).unwrap();
        assert_eq!((u.height(), u.width(), u.channels()), (1, 1, 4));
        // Output channel = c·r² + dr·r + dc: [ (0,0), (0,1), (1,0), (1,1) ].
        assert_eq!(u.data().as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unshuffle_multichannel_ordering() {
        // 2 channels: channel blocks stay contiguous in the output.
        let mut d = Array3::<f64>::zeros((1, 4, 2));
        for tok in 0..4 {
            d[[0, tok, 0]] = 10.0 + tok as f64;
            d[[0, tok, 1]] = 20.0 + tok as f64;
        }
        let g = TokenGrid::new(d, 2, 2).unwrap();
        let u = pixel_unshuffle(&g, 2).unwrap();
        assert_eq!(
            u.data().as_slice().unwrap(),
            &[10.0, 11.0, 12.0, 13.0, 20.0, 21.0, 22.0, 23.0]
        );
    }

    #[test]
    fn shuffle_factor_one_is_identity() {
        let mut rng = SeededRng::new(1, 0);
        let g = rand_grid(&mut rng, 2, 3, 4, 5);
        assert_eq!(pixel_unshuffle(&g, 1).unwrap(), g);
        assert_eq!(pixel_shuffle(&g, 1).unwrap(), g);
    }

    #[test]
    fn shuffle_errors() {
        let mut rng = SeededRng::new(2, 0);
        let g = rand_grid(&mut rng, 1, 3, 3, 4);
        assert!(pixel_unshuffle(&g, 2).is_err());
        let g2 = rand_grid(&mut rng, 1, 2, 2, 3);
        assert!(pixel_shuffle(&g2, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shuffle_round_trip(seed in 0u64..1000, r in 1usize..4, hb in 1usize..4, wb in 1usize..4, c in 1usize..5) {
            let mut rng = SeededRng::new(seed, 0);
            let g = rand_grid(&mut rng, 2, hb * r, wb * r, c);
            let down = pixel_unshuffle(&g, r).unwrap();
            let back = pixel_shuffle(&down, r).unwrap();
            prop_assert_eq!(back, g.clone());
            // And the other direction, starting from the coarse grid.
            let up = pixel_shuffle(&down, r).unwrap();
            let again = pixel_unshuffle(&up, r).unwrap();
            prop_assert_eq!(again, down);
        }
    }

    #[test]
    fn nearest_upsample_replicates() {
        let d = Array3::from_shape_vec((1, 1, 2), vec![7.0, -3.0]).unwrap();
        let g = TokenGrid::new(d, 1, 1).unwrap();
        let u = nearest_upsample(&g, 2).unwrap();
        assert_eq!((u.height(), u.width()), (2, 2));
        for tok in 0..4 {
            assert_eq!(u.data()[[0, tok, 0]], 7.0);
            assert_eq!(u.data()[[0, tok, 1]], -3.0);
        }

        // Distinct 2x2 tokens expand into the right blocks.
        let d = Array3::from_shape_vec((1, 4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = TokenGrid::new(d, 2, 2).unwrap();
        let u = nearest_upsample(&g, 2).unwrap();
        let expect = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(u.data().as_slice().unwrap(), &expect);

        // Replication preserves the token mean.
        let mut rng = SeededRng::new(3, 0);
        let g = rand_grid(&mut rng, 2, 3, 2, 4);
        let u = nearest_upsample(&g, 3).unwrap();
        let mean_in = g.data().sum() / g.data().len() as f64;
        let mean_out = u.data().sum() / u.data().len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn patchify_shape_and_identity() {
        let mut rng = SeededRng::new(4, 0);
        let mut img = Array4::<f64>::zeros((2, 3, 16, 16));
        for v in img.iter_mut() {
            *v = rng.normal_f64();
        }
        let k = 2 * 2 * 3;
        let w = Array2::<f64>::eye(k);
        let g = patchify(&img, 2, &w, None).unwrap();
        assert_eq!((g.height(), g.width(), g.channels()), (8, 8, k));

        // Round trip through the inverse map reconstructs the image.
        let back = unpatchify(&g, 2, 3).unwrap();
        let max_err = img
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-5, "round-trip error {max_err}");
    }

    #[test]
    fn patchify_patch1_identity_embed_gives_pixel_vectors() {
        let mut rng = SeededRng::new(5, 0);
        let mut img = Array4::<f64>::zeros((1, 3, 2, 2));
        for v in img.iter_mut() {
            *v = rng.normal_f64();
        }
        let w = Array2::<f64>::eye(3);
        let g = patchify(&img, 1, &w, None).unwrap();
        for row in 0..2 {
            for col in 0..2 {
                for c in 0..3 {
                    assert_eq!(g.data()[[0, row * 2 + col, c]], img[[0, c, row, col]]);
                }
            }
        }
    }

    #[test]
    fn patchify_rejects_bad_shapes() {
        let img = Array4::<f64>::zeros((1, 3, 15, 16));
        let w = Array2::<f64>::eye(12);
        assert!(patchify(&img, 2, &w, None).is_err());
        let img2 = Array4::<f64>::zeros((1, 3, 16, 16));
        let w_bad = Array2::<f64>::eye(13);
        assert!(patchify(&img2, 2, &w_bad, None).is_err());
    }

    #[test]
    fn rope_table_validation() {
        assert!(RopeTable::<f64>::new(8, 6).is_err());
        assert!(RopeTable::<f64>::new(8, 0).is_err());
        assert!(RopeTable::<f64>::new(0, 8).is_err());
        assert!(RopeTable::<f64>::new(8, 8).is_ok());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let table = RopeTable::<f64>::new(4, 8).unwrap();
        let mut rng = SeededRng::new(6, 0);
        let mut x = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 8]));
        for v in x.iter_mut() {
            *v = rng.normal_f64();
        }
        // 1x1 grid: the only token sits at position (0,0).
        let y = table.apply(&x, 1, 1).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rope_preserves_norms() {
        let table = RopeTable::<f64>::new(8, 12).unwrap();
        let mut rng = SeededRng::new(7, 0);
        let mut x = ArrayD::<f64>::zeros(IxDyn(&[3, 12, 12]));
        for v in x.iter_mut() {
            *v = rng.normal_f64();
        }
        let y = table.apply(&x, 3, 4).unwrap();
        // Norm preserved per token vector (a fortiori per rotation pair).
        for m in 0..3 {
            for n in 0..12 {
                let nx: f64 = (0..12).map(|d| x[[m, n, d]] * x[[m, n, d]]).sum();
                let ny: f64 = (0..12).map(|d| y[[m, n, d]] * y[[m, n, d]]).sum();
                assert!((nx.sqrt() - ny.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rope_dot_depends_only_on_relative_position() {
        // Brute force over all position pairs of a 3x3 grid: the rotated dot
        // product must be a function of (Δrow, Δcol) only.
        let table = RopeTable::<f64>::new(3, 8).unwrap();
        let mut rng = SeededRng::new(8, 0);
        let q: Vec<f64> = (0..8).map(|_| rng.normal_f64()).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.normal_f64()).collect();
        // Embed q at every grid position, k at every grid position.
        let mut x = ArrayD::<f64>::zeros(IxDyn(&[2, 9, 8]));
        for n in 0..9 {
            for d in 0..8 {
                x[[0, n, d]] = q[d];
                x[[1, n, d]] = k[d];
            }
        }
        let y = table.apply(&x, 3, 3).unwrap();
        let mut by_delta: std::collections::HashMap<(i64, i64), f64> = Default::default();
        for p1 in 0..9usize {
            for p2 in 0..9usize {
                let dot: f64 = (0..8).map(|d| y[[0, p1, d]] * y[[1, p2, d]]).sum();
                let delta = (
                    p1 as i64 / 3 - p2 as i64 / 3,
                    p1 as i64 % 3 - p2 as i64 % 3,
                );
                if let Some(&prev) = by_delta.get(&delta) {
                    assert!(
                        (prev - dot).abs() < 1e-9,
                        "dot at delta {delta:?} not translation invariant: {prev} vs {dot}"
                    );
                } else {
                    by_delta.insert(delta, dot);
                }
            }
        }
        // 3x3 grid has 25 distinct (Δr, Δc) pairs.
        assert_eq!(by_delta.len(), 25);
    }

    #[test]
    fn rope_rejects_small_table() {
        let table = RopeTable::<f64>::new(2, 8).unwrap();
        let x = ArrayD::<f64>::zeros(IxDyn(&[1, 9, 8]));
        assert!(table.apply(&x, 3, 3).is_err());
    }

    #[test]
    fn grid_cast_preserves_values() {
        let mut rng = SeededRng::new(9, 0);
        let g = rand_grid(&mut rng, 1, 2, 2, 3);
        let g32: TokenGrid<f32> = g.cast();
        for (a, b) in g.data().iter().zip(g32.data().iter()) {
            assert_eq!(*b, *a as f32);
        }
    }
}
