//! Dense row-major tensors over f32/f64 and the small op set training needs.

use crate::error::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;

/// Element width tag, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Bytes per element.
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Stable textual name.
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    /// Parses the textual name back.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::invalid(format_args!("unknown dtype {other:?}"))),
        }
    }
}

/// Float element type. All transcendentals route through `libm` so f32 and
/// f64 results are identical across platforms and `std`/`no_std` builds;
/// `+ - * /` are IEEE-exact and need no such indirection.
pub trait Element:
    Copy
    + PartialOrd
    + core::fmt::Debug
    + core::fmt::Display
    + core::ops::Add<Output = Self>
    + core::ops::Sub<Output = Self>
    + core::ops::Mul<Output = Self>
    + core::ops::Div<Output = Self>
    + core::ops::Neg<Output = Self>
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    /// Next representable value toward negative infinity.
    fn next_down(self) -> Self;
    fn encode_le(self, out: &mut Vec<u8>);
    fn decode_le(bytes: &[u8]) -> Self;

    /// Larger of the two values (either one if equal).
    fn maxf(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// `acc[l] += self · b[l]` across one TILE_COLS-wide strip of the gemm
    /// tile kernel. Overrides may fuse each multiply-accumulate into a
    /// single rounding where the hardware provides it; the terms and their
    /// order are the same either way.
    #[inline(always)]
    fn fma_strip(self, b: &[Self; TILE_COLS], acc: &mut [Self; TILE_COLS]) {
        for (al, &bl) in acc.iter_mut().zip(b) {
            *al += self * bl;
        }
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrtf(self)
    }
    fn tanh(self) -> Self {
        libm::tanhf(self)
    }
    fn abs(self) -> Self {
        libm::fabsf(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn next_down(self) -> Self {
        f32::next_down(self)
    }
    fn encode_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn decode_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    /// Two fused 8-lane multiply-adds per strip, one rounding per element.
    #[cfg(all(target_arch = "x86_64", target_feature = "avx", target_feature = "fma"))]
    #[inline(always)]
    fn fma_strip(self, b: &[Self; TILE_COLS], acc: &mut [Self; TILE_COLS]) {
        use core::arch::x86_64::{
            _mm256_fmadd_ps, _mm256_loadu_ps, _mm256_set1_ps, _mm256_storeu_ps,
        };
        // SAFETY: the cfg gate guarantees AVX and FMA at compile time, and
        // each load/store touches exactly eight of the sixteen lanes of the
        // fixed-size arrays.
        unsafe {
            let cf = _mm256_set1_ps(self);
            let lo =
                _mm256_fmadd_ps(cf, _mm256_loadu_ps(b.as_ptr()), _mm256_loadu_ps(acc.as_ptr()));
            let hi = _mm256_fmadd_ps(
                cf,
                _mm256_loadu_ps(b.as_ptr().add(8)),
                _mm256_loadu_ps(acc.as_ptr().add(8)),
            );
            _mm256_storeu_ps(acc.as_mut_ptr(), lo);
            _mm256_storeu_ps(acc.as_mut_ptr().add(8), hi);
        }
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
    fn abs(self) -> Self {
        libm::fabs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn next_down(self) -> Self {
        f64::next_down(self)
    }
    fn encode_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn decode_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; shape.iter().product()],
        }
    }

    /// Wraps an existing buffer; its length must match the shape volume.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let volume: usize = shape.iter().product();
        if data.len() != volume {
            return Err(Error::invalid(format_args!(
                "data length {} does not match shape {shape:?} (volume {volume})",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Dimension sizes.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of dimensions.
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat element buffer, row-major.
    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable flat element buffer.
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Same buffer under a new shape of equal volume.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let volume: usize = shape.iter().product();
        if volume != self.data.len() {
            return Err(Error::invalid(format_args!(
                "cannot reshape volume {} into {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::invalid(format_args!("expected 2-D tensor, got shape {other:?}"))),
        }
    }

    /// Row `i` of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> &[E] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format_args!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise sum.
pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape(a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Elementwise product.
pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape(a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// 2-D matrix product `a @ b`.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::invalid(format_args!(
            "matmul inner dims differ: [{m}, {k}] @ [{k2}, {n}]"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, a.data(), b.data(), out.data_mut());
    Ok(out)
}

/// 2-D transpose.
pub fn transpose<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let (r, c) = a.dims2()?;
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = a.data()[i * c + j];
        }
    }
    Ok(out)
}

/// Softmax over the last dimension, numerically stabilised by max
/// subtraction. Treats the tensor as rows of its trailing dimension.
pub fn softmax_rows<E: Element>(a: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rank() == 0 || a.is_empty() {
        return Err(Error::degenerate("softmax of empty tensor"));
    }
    let cols = a.shape()[a.rank() - 1];
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// In-place stabilised softmax of one row.
pub(crate) fn softmax_in_place<E: Element>(row: &mut [E]) {
    let mut max = row[0];
    for &x in row.iter() {
        max = max.maxf(x);
    }
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        let e = (*x - max).exp();
        sum += e.to_f64();
        *x = e;
    }
    let inv = E::from_f64(1.0 / sum);
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Population mean and standard deviation (divisor n, not n-1), accumulated
/// in f64 over two passes.
pub fn moments<E: Element>(a: &Tensor<E>) -> Result<(f64, f64)> {
    moments_slice(a.data())
}

/// [`moments`] over a raw slice.
pub fn moments_slice<E: Element>(data: &[E]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::degenerate("moments of empty tensor"));
    }
    let n = data.len() as f64;
    let mut sum = 0.0f64;
    for &x in data {
        sum += x.to_f64();
    }
    let mean = sum / n;
    let mut sq = 0.0f64;
    for &x in data {
        let d = x.to_f64() - mean;
        sq += d * d;
    }
    Ok((mean, libm::sqrt(sq / n)))
}

/// Frobenius norm, accumulated in f64.
pub fn frobenius_norm<E: Element>(a: &Tensor<E>) -> f64 {
    let mut sq = 0.0f64;
    for &x in a.data() {
        let v = x.to_f64();
        sq += v * v;
    }
    libm::sqrt(sq)
}

// --- gemm kernels -----------------------------------------------------------
//
// Weights are stored [n_in, n_out] row-major, so the forward pass is plain
// `nn`, input gradients are `nt` (B transposed), and weight gradients are
// `tn` (A transposed). Every output element accumulates its products in
// ascending reduction-index order, which keeps the `parallel` feature
// bit-identical to serial and the `nt` form bit-identical to `nn` on a
// transposed operand.
//
// All three forms run the same packed tile kernel: the B-side operand is
// repacked once per call into contiguous column panels and the A-side
// coefficients into one small panel per block of output rows, so the inner
// loop walks two exact-size chunk iterators with the partial sums held in
// vector registers and no bounds checks or strided loads. Packing costs one
// sweep over each operand while the panels are reused across the whole
// product, and it changes neither the set of terms per output element nor
// the order they are added in; the row and column tails fall back to a
// straight-line form with the same per-element order. On targets with fused
// multiply-add the tile path rounds each multiply-accumulate once while the
// tails round twice, but any given output element is produced wholly by one
// path, so every product is still deterministic within a build.

/// Output rows per register tile.
const TILE_ROWS: usize = 4;
/// Output columns per register tile.
const TILE_COLS: usize = 16;

/// One packed tile update: `acc[r][l] += Σ_q ap[q·R+r] · bp[q·C+l]` with the
/// reduction index `q` ascending over both panels in lockstep.
#[inline(always)]
fn packed_tile<E: Element>(ap: &[E], bp: &[E], acc: &mut [[E; TILE_COLS]; TILE_ROWS]) {
    for (av, bv) in ap.chunks_exact(TILE_ROWS).zip(bp.chunks_exact(TILE_COLS)) {
        let bv: &[E; TILE_COLS] = bv.try_into().expect("exact chunk");
        for (r, row) in acc.iter_mut().enumerate() {
            av[r].fma_strip(bv, row);
        }
    }
}

/// Straight-line fallback for tails: `c_tail[j] += Σ_p coeff(p) · b[p, j0+j]`
/// with `p` ascending, matching the packed kernel's per-element order.
#[inline(always)]
fn axpy_rows<E: Element>(
    coeffs: impl Iterator<Item = E>,
    n: usize,
    j0: usize,
    b: &[E],
    c_tail: &mut [E],
) {
    for (p, cf) in coeffs.enumerate() {
        let b_row = &b[p * n + j0..(p + 1) * n];
        for (cj, &bj) in c_tail.iter_mut().zip(b_row) {
            *cj += cf * bj;
        }
    }
}

/// Packs the full TILE_COLS-wide column blocks of a row-major `[red, n]`
/// operand into contiguous `red × TILE_COLS` panels.
fn pack_col_panels<E: Element>(red: usize, n: usize, b: &[E]) -> Vec<E> {
    let n_full = n - n % TILE_COLS;
    let mut bp = Vec::with_capacity(n_full * red);
    for j0 in (0..n_full).step_by(TILE_COLS) {
        for b_row in b.chunks_exact(n) {
            bp.extend_from_slice(&b_row[j0..j0 + TILE_COLS]);
        }
    }
    bp
}

/// Packs TILE_ROWS rows of a row-major `[*, k]` operand into an interleaved
/// `k × TILE_ROWS` coefficient panel.
#[inline]
fn pack_row_panel<E: Element>(k: usize, rows: &[E], ap: &mut [E]) {
    for (r, a_row) in rows.chunks_exact(k).enumerate() {
        for (q, &v) in a_row.iter().enumerate() {
            ap[q * TILE_ROWS + r] = v;
        }
    }
}

/// Shared tile driver over `c[rows, n]`: `fill_a` packs the reduction
/// coefficients for one block of TILE_ROWS output rows, `bp` holds the
/// B-side column panels, and `leftover` finishes one output row from column
/// `j0` on in straight-line form (column tails and the final short row
/// block).
fn tile_driver<E, FA, FL>(red: usize, n: usize, bp: &[E], fill_a: FA, leftover: FL, c: &mut [E])
where
    E: Element,
    FA: Fn(usize, &mut [E]) + Sync,
    FL: Fn(usize, usize, &mut [E]) + Sync,
{
    let n_full = n - n % TILE_COLS;
    // The coefficient panel is fully rewritten by `fill_a` for every block,
    // so one buffer per worker is reused across blocks instead of allocating
    // per block.
    let block = |c_blk: &mut [E], blk: usize, ap: &mut [E]| {
        let i0 = blk * TILE_ROWS;
        if c_blk.len() == TILE_ROWS * n {
            fill_a(i0, ap);
            for jb in (0..n_full).step_by(TILE_COLS) {
                let mut acc = [[E::ZERO; TILE_COLS]; TILE_ROWS];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c_blk[r * n + jb..r * n + jb + TILE_COLS]);
                }
                packed_tile(ap, &bp[jb * red..(jb + TILE_COLS) * red], &mut acc);
                for (r, row) in acc.iter().enumerate() {
                    c_blk[r * n + jb..r * n + jb + TILE_COLS].copy_from_slice(row);
                }
            }
            if n_full < n {
                for (r, c_row) in c_blk.chunks_mut(n).enumerate() {
                    leftover(i0 + r, n_full, &mut c_row[n_full..]);
                }
            }
        } else {
            for (r, c_row) in c_blk.chunks_mut(n).enumerate() {
                leftover(i0 + r, 0, c_row);
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        c.par_chunks_mut(TILE_ROWS * n).enumerate().for_each_init(
            || vec![E::ZERO; red * TILE_ROWS],
            |ap, (blk, c_blk)| block(c_blk, blk, ap),
        );
        return;
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut ap = vec![E::ZERO; red * TILE_ROWS];
        for (blk, c_blk) in c.chunks_mut(TILE_ROWS * n).enumerate() {
            block(c_blk, blk, &mut ap);
        }
    }
}

/// `c[m,n] += a[m,k] @ b[k,n]`. `c` must start zeroed for a plain product.
pub(crate) fn gemm_nn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let bp = pack_col_panels(k, n, b);
    let fill_a = |i0: usize, ap: &mut [E]| {
        pack_row_panel(k, &a[i0 * k..(i0 + TILE_ROWS) * k], ap);
    };
    let leftover = |i: usize, j0: usize, c_tail: &mut [E]| {
        axpy_rows(a[i * k..(i + 1) * k].iter().copied(), n, j0, b, c_tail);
    };
    tile_driver(k, n, &bp, fill_a, leftover, c);
}

/// `c[m,n] += a[m,k] @ b[n,k]^T`. The transposed operand is packed straight
/// from its row-major layout into the same column panels `gemm_nn` uses, so
/// the result matches `gemm_nn` against a pre-transposed copy of `b` bit
/// for bit.
pub(crate) fn gemm_nt<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let n_full = n - n % TILE_COLS;
    let mut bp = Vec::with_capacity(n_full * k);
    for j0 in (0..n_full).step_by(TILE_COLS) {
        let rows = &b[j0 * k..(j0 + TILE_COLS) * k];
        for q in 0..k {
            for l in 0..TILE_COLS {
                bp.push(rows[l * k + q]);
            }
        }
    }
    let fill_a = |i0: usize, ap: &mut [E]| {
        pack_row_panel(k, &a[i0 * k..(i0 + TILE_ROWS) * k], ap);
    };
    let leftover = |i: usize, j0: usize, c_tail: &mut [E]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (jj, cj) in c_tail.iter_mut().enumerate() {
            let b_row = &b[(j0 + jj) * k..(j0 + jj + 1) * k];
            let mut s = *cj;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s = s + av * bv;
            }
            *cj = s;
        }
    };
    tile_driver(k, n, &bp, fill_a, leftover, c);
}

/// `c[k,n] += a[m,k]^T @ b[m,n]`.
pub(crate) fn gemm_tn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let bp = pack_col_panels(m, n, b);
    let fill_a = |p0: usize, ap: &mut [E]| {
        for (a_row, dst) in a.chunks_exact(k).zip(ap.chunks_exact_mut(TILE_ROWS)) {
            dst.copy_from_slice(&a_row[p0..p0 + TILE_ROWS]);
        }
    };
    let leftover = |p: usize, j0: usize, c_tail: &mut [E]| {
        axpy_rows(a.iter().skip(p).step_by(k).copied(), n, j0, b, c_tail);
    };
    tile_driver(m, n, &bp, fill_a, leftover, c);
}
