//! Dense matrices, the bit-packed ternary weight format, the multiplier-free
//! 8b x 2b GEMM and convolution lowering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, Dequantize, QuantSpec};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// M x K matrix of 8-bit unsigned activation codes.
pub type ActivationMatrix = Matrix<u8>;
/// M x N matrix of 32-bit signed accumulators.
pub type AccMatrix = Matrix<i32>;

impl<T> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Copy> Matrix<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

impl<T: Copy + Default> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }
}

impl Matrix<f64> {
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }
}

impl AccMatrix {
    /// FNV-1a over the little-endian bytes of every accumulator, row-major.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// One 2-bit weight field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ternary {
    Neg,
    Zero,
    Pos,
}

impl Ternary {
    pub const FIELD_POS: u32 = 0b01;
    pub const FIELD_ZERO: u32 = 0b00;
    pub const FIELD_NEG: u32 = 0b11;
    pub const FIELD_INVALID: u32 = 0b10;

    pub fn from_code(c: i32) -> Option<Ternary> {
        match c {
            -1 => Some(Ternary::Neg),
            0 => Some(Ternary::Zero),
            1 => Some(Ternary::Pos),
            _ => None,
        }
    }

    pub fn code(self) -> i8 {
        match self {
            Ternary::Neg => -1,
            Ternary::Zero => 0,
            Ternary::Pos => 1,
        }
    }

    pub fn field(self) -> u32 {
        match self {
            Ternary::Neg => Self::FIELD_NEG,
            Ternary::Zero => Self::FIELD_ZERO,
            Ternary::Pos => Self::FIELD_POS,
        }
    }

    /// Decodes a 2-bit field; `None` for the reserved `10` pattern.
    pub fn from_field(f: u32) -> Option<Ternary> {
        match f & 0b11 {
            Self::FIELD_POS => Some(Ternary::Pos),
            Self::FIELD_ZERO => Some(Ternary::Zero),
            Self::FIELD_NEG => Some(Ternary::Neg),
            _ => None,
        }
    }

    /// Sign-select: adds, subtracts or skips `a`. No multiplier involved.
    #[inline]
    pub fn apply(self, acc: i32, a: u8) -> i32 {
        match self {
            Ternary::Pos => acc + a as i32,
            Ternary::Zero => acc,
            Ternary::Neg => acc - a as i32,
        }
    }
}

pub const CODES_PER_WORD: usize = 16;

/// K x N ternary matrix, 16 two-bit fields per `u32`, column-major.
///
/// Column `j` occupies words `j * words_per_col .. (j + 1) * words_per_col`;
/// row `k` sits at bits `2 * (k % 16)` of word `k / 16` within that column.
/// Unused trailing fields are `00`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTernaryMatrix {
    rows: usize,
    cols: usize,
    words: Vec<u32>,
}

impl PackedTernaryMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn words_per_col(&self) -> usize {
        self.rows.div_ceil(CODES_PER_WORD)
    }

    /// Rebuilds a matrix from raw words (e.g. after transport). Field
    /// validity is checked lazily by the consumers.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u32>) -> Result<Self> {
        let expect = rows.div_ceil(CODES_PER_WORD) * cols;
        if words.len() != expect {
            return Err(Error::shape(format!(
                "{rows}x{cols} packed matrix needs {expect} words, got {}",
                words.len()
            )));
        }
        Ok(PackedTernaryMatrix { rows, cols, words })
    }

    /// Words holding column `j`.
    pub fn column(&self, j: usize) -> &[u32] {
        let w = self.words_per_col();
        &self.words[j * w..(j + 1) * w]
    }

    pub fn field(&self, k: usize, j: usize) -> u32 {
        let word = self.column(j)[k / CODES_PER_WORD];
        (word >> (2 * (k % CODES_PER_WORD))) & 0b11
    }

    pub fn get(&self, k: usize, j: usize) -> Result<Ternary> {
        Ternary::from_field(self.field(k, j)).ok_or(Error::CorruptedField { row: k, col: j })
    }

    /// Scans every logical field for the reserved `10` pattern.
    pub fn validate(&self) -> Result<()> {
        for j in 0..self.cols {
            for k in 0..self.rows {
                self.get(k, j)?;
            }
        }
        Ok(())
    }
}

pub fn pack_ternary(codes: &Matrix<i32>) -> Result<PackedTernaryMatrix> {
    let (rows, cols) = (codes.rows(), codes.cols());
    let wpc = rows.div_ceil(CODES_PER_WORD);
    let mut words = vec![0u32; wpc * cols];
    for k in 0..rows {
        for j in 0..cols {
            let value = codes.get(k, j);
            let t = Ternary::from_code(value).ok_or(Error::InvalidCode {
                row: k,
                col: j,
                value,
            })?;
            words[j * wpc + k / CODES_PER_WORD] |= t.field() << (2 * (k % CODES_PER_WORD));
        }
    }
    Ok(PackedTernaryMatrix { rows, cols, words })
}

pub fn unpack_ternary(p: &PackedTernaryMatrix) -> Result<Matrix<i32>> {
    let mut out = Matrix::zeros(p.rows, p.cols);
    for k in 0..p.rows {
        for j in 0..p.cols {
            out.set(k, j, p.get(k, j)?.code() as i32);
        }
    }
    Ok(out)
}

/// Largest inner dimension for which `K * 255` fits a signed 32-bit
/// accumulator with margin.
pub const MAX_DEPTH: usize = 1 << 23;

fn check_inner(a_cols: usize, b_rows: usize) -> Result<()> {
    if a_cols != b_rows {
        return Err(Error::shape(format!(
            "inner dimensions differ: A has {a_cols} columns, B has {b_rows} rows"
        )));
    }
    Ok(())
}

pub(crate) fn check_depth(k: usize) -> Result<()> {
    if k > MAX_DEPTH {
        return Err(Error::OverflowRisk {
            depth: k,
            limit: MAX_DEPTH,
        });
    }
    Ok(())
}

/// Multiplier-free product of 8-bit activations and packed ternary weights.
///
/// Output rows are computed in parallel; each accumulator sums in `k` order
/// so the result is independent of the partition.
pub fn gemm_ternary(a: &ActivationMatrix, b: &PackedTernaryMatrix) -> Result<AccMatrix> {
    check_inner(a.cols(), b.rows())?;
    check_depth(b.rows())?;
    b.validate()?;
    let (m, n, k) = (a.rows(), b.cols(), b.rows());
    let mut out = vec![0i32; m * n];
    if n == 0 {
        return Matrix::from_vec(m, n, out);
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = a.row(i);
        let full = k / CODES_PER_WORD;
        for (j, acc_out) in row.iter_mut().enumerate() {
            let col = b.column(j);
            let mut acc = 0i32;
            for (&word, chunk) in col[..full].iter().zip(arow.chunks_exact(CODES_PER_WORD)) {
                for (t, &av) in chunk.iter().enumerate() {
                    acc += select(word >> (2 * t), av);
                }
            }
            if full < col.len() {
                let word = col[full];
                for (t, &av) in arow[full * CODES_PER_WORD..].iter().enumerate() {
                    acc += select(word >> (2 * t), av);
                }
            }
            *acc_out = acc;
        }
    });
    Matrix::from_vec(m, n, out)
}

/// Branch-free sign select on the low two bits of `field`:
/// 01 -> +a, 11 -> -a, 00 -> 0 (10 is rejected before this runs).
#[inline(always)]
fn select(field: u32, a: u8) -> i32 {
    let keep = -((field & 1) as i32);
    let neg = -(((field >> 1) & 1) as i32);
    ((a as i32 & keep) ^ neg) - neg
}

/// Integer multiply-accumulate for general k-bit codes.
pub fn gemm_int(a: &Matrix<u32>, b: &Matrix<i32>) -> Result<Matrix<i128>> {
    check_inner(a.cols(), b.rows())?;
    let (m, n, k) = (a.rows(), b.cols(), a.cols());
    let mut out = vec![0i128; m * n];
    if n == 0 {
        return Matrix::from_vec(m, n, out);
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = a.get(i, p) as i128;
            if av == 0 {
                continue;
            }
            let brow = b.row(p);
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv as i128;
            }
        }
    });
    Matrix::from_vec(m, n, out)
}

/// Full-precision triple-loop product.
pub fn gemm_ref(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<Matrix<f64>> {
    check_inner(a.cols(), b.rows())?;
    let (m, n, k) = (a.rows(), b.cols(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(i, p) * b.get(p, j);
            }
            out[i * n + j] = s;
        }
    }
    Matrix::from_vec(m, n, out)
}

/// H x W x C tensor, channel-fastest layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<T = f64> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T> FeatureMap<T> {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} map needs {} elements, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

impl<T: Copy> FeatureMap<T> {
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Window geometry shared by im2col, convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry {
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    /// Output spatial dims for an `h x w` input, floor rounding.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kh == 0 || self.kw == 0 || self.stride == 0 {
            return Err(Error::InvalidGeometry(
                "kernel and stride must be at least 1".into(),
            ));
        }
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.kh > ph || self.kw > pw {
            return Err(Error::InvalidGeometry(format!(
                "{}x{} kernel exceeds padded {ph}x{pw} input",
                self.kh, self.kw
            )));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

/// Lowers convolution windows into rows: one row per output pixel
/// (row-major over the output grid), columns in `(kh, kw, C)` order. Padding
/// contributes `T::default()`.
pub fn im2col<T: Copy + Default>(input: &FeatureMap<T>, geom: ConvGeometry) -> Result<Matrix<T>> {
    let (oh, ow) = geom.output_dims(input.height, input.width)?;
    let c = input.channels;
    let cols = geom.kh * geom.kw * c;
    let mut data = Vec::with_capacity(oh * ow * cols);
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..geom.kh {
                for dx in 0..geom.kw {
                    let y = (oy * geom.stride + dy) as isize - geom.pad as isize;
                    let x = (ox * geom.stride + dx) as isize - geom.pad as isize;
                    if y < 0 || x < 0 || y >= input.height as isize || x >= input.width as isize {
                        data.extend(std::iter::repeat_n(T::default(), c));
                    } else {
                        let off = (y as usize * input.width + x as usize) * c;
                        data.extend_from_slice(&input.data[off..off + c]);
                    }
                }
            }
        }
    }
    Matrix::from_vec(oh * ow, cols, data)
}

/// Scatter-adds a column matrix back onto an `h x w x c` map; adjoint of
/// [`im2col`].
pub fn col2im(
    cols: &Matrix<f64>,
    height: usize,
    width: usize,
    channels: usize,
    geom: ConvGeometry,
) -> Result<FeatureMap<f64>> {
    let (oh, ow) = geom.output_dims(height, width)?;
    if cols.rows() != oh * ow || cols.cols() != geom.kh * geom.kw * channels {
        return Err(Error::shape(format!(
            "column matrix {}x{} does not match geometry",
            cols.rows(),
            cols.cols()
        )));
    }
    let mut out = vec![0.0; height * width * channels];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = cols.row(oy * ow + ox);
            let mut idx = 0;
            for dy in 0..geom.kh {
                for dx in 0..geom.kw {
                    let y = (oy * geom.stride + dy) as isize - geom.pad as isize;
                    let x = (ox * geom.stride + dx) as isize - geom.pad as isize;
                    if y >= 0 && x >= 0 && y < height as isize && x < width as isize {
                        let off = (y as usize * width + x as usize) * channels;
                        for ch in 0..channels {
                            out[off + ch] += row[idx + ch];
                        }
                    }
                    idx += channels;
                }
            }
        }
    }
    FeatureMap::from_vec(height, width, channels, out)
}

/// Convolution filters laid out `kh x kw x C x F`, which is exactly a
/// `(kh*kw*C) x F` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kh: usize,
    pub kw: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub data: Vec<f64>,
}

impl ConvWeights {
    pub fn new(
        kh: usize,
        kw: usize,
        in_channels: usize,
        out_channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != kh * kw * in_channels * out_channels {
            return Err(Error::shape(format!(
                "{kh}x{kw}x{in_channels}x{out_channels} filters need {} values, got {}",
                kh * kw * in_channels * out_channels,
                data.len()
            )));
        }
        Ok(ConvWeights {
            kh,
            kw,
            in_channels,
            out_channels,
            data,
        })
    }

    pub fn as_matrix(&self) -> Matrix<f64> {
        Matrix {
            rows: self.kh * self.kw * self.in_channels,
            cols: self.out_channels,
            data: self.data.clone(),
        }
    }
}

/// Quantized convolution through im2col and integer GEMM.
///
/// With 2-bit weights and activations of at most 8 bits the product runs on
/// [`gemm_ternary`]; other integer widths use [`gemm_int`]; a 32-bit operand
/// on either side falls back to floating point on the dequantized values.
/// The integer result is rescaled by `s_A * s_B`.
pub fn conv2d_lowprec(
    input: &FeatureMap<f64>,
    weights: &ConvWeights,
    spec: QuantSpec,
    stride: usize,
    pad: usize,
) -> Result<FeatureMap<f64>> {
    if weights.in_channels != input.channels {
        return Err(Error::shape(format!(
            "filters expect {} channels, input has {}",
            weights.in_channels, input.channels
        )));
    }
    let geom = ConvGeometry {
        kh: weights.kh,
        kw: weights.kw,
        stride,
        pad,
    };
    let (oh, ow) = geom.output_dims(input.height, input.width)?;
    let qa = quant::quantize_activations(&input.data, spec.act_bits())?;
    let qw = quant::quantize_weights(&weights.data, spec.weight_bits())?;
    let rows = weights.kh * weights.kw * weights.in_channels;
    let f = weights.out_channels;

    let out = match (qa.codes(), qw.codes()) {
        (Some(acodes), Some(wcodes)) => {
            let scale = qa.scale() * qw.scale();
            let amap = FeatureMap::from_vec(
                input.height,
                input.width,
                input.channels,
                acodes.to_vec(),
            )?;
            let cols = im2col(&amap, geom)?;
            let wmat = Matrix::from_vec(rows, f, wcodes.to_vec())?;
            if spec.weight_bits() == 2 && spec.act_bits() <= 8 {
                let a8 = cols.map(|&c| c as u8);
                let packed = pack_ternary(&wmat)?;
                gemm_ternary(&a8, &packed)?
                    .into_vec()
                    .into_iter()
                    .map(|v| v as f64 * scale)
                    .collect()
            } else {
                gemm_int(&cols, &wmat)?
                    .into_vec()
                    .into_iter()
                    .map(|v| v as f64 * scale)
                    .collect()
            }
        }
        _ => {
            let amap = FeatureMap::from_vec(
                input.height,
                input.width,
                input.channels,
                qa.dequantize(),
            )?;
            let cols = im2col(&amap, geom)?;
            let wmat = Matrix::from_vec(rows, f, qw.dequantize())?;
            gemm_ref(&cols, &wmat)?.into_vec()
        }
    };
    FeatureMap::from_vec(oh, ow, f, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mac_oracle(a: &Matrix<u8>, b: &Matrix<i32>) -> Matrix<i32> {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0i64;
                for p in 0..a.cols() {
                    s += a.get(i, p) as i64 * b.get(p, j) as i64;
                }
                c.set(i, j, s as i32);
            }
        }
        c
    }

    fn random_operands(rng: &mut ChaCha8Rng, m: usize, n: usize, k: usize) -> (Matrix<u8>, Matrix<i32>) {
        let a = Matrix::from_vec(m, k, (0..m * k).map(|_| rng.random::<u8>()).collect()).unwrap();
        let b = Matrix::from_vec(k, n, (0..k * n).map(|_| rng.random_range(-1..=1)).collect()).unwrap();
        (a, b)
    }

    #[test]
    fn pack_examples() {
        let codes = Matrix::from_vec(3, 1, vec![1, 0, -1]).unwrap();
        let p = pack_ternary(&codes).unwrap();
        assert_eq!(p.field(0, 0), 0b01);
        assert_eq!(p.field(1, 0), 0b00);
        assert_eq!(p.field(2, 0), 0b11);
        assert_eq!(p.words(), &[0b11_00_01]);

        let z = pack_ternary(&Matrix::zeros(4, 4)).unwrap();
        assert!(z.words().iter().all(|&w| w == 0));

        let mut bad = Matrix::zeros(2, 2);
        bad.set(0, 0, 2);
        assert_eq!(
            pack_ternary(&bad).unwrap_err(),
            Error::InvalidCode {
                row: 0,
                col: 0,
                value: 2
            }
        );
    }

    #[test]
    fn unpack_examples() {
        let p = PackedTernaryMatrix::from_words(2, 1, vec![0b11_01]).unwrap();
        assert_eq!(unpack_ternary(&p).unwrap().data(), &[1, -1]);
        let bad = PackedTernaryMatrix::from_words(1, 1, vec![0b10]).unwrap();
        assert_eq!(
            unpack_ternary(&bad).unwrap_err(),
            Error::CorruptedField { row: 0, col: 0 }
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, b) = random_operands(&mut rng, 1, 5, 7);
        assert_eq!(unpack_ternary(&pack_ternary(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn packed_matrix_never_holds_reserved_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (_, b) = random_operands(&mut rng, 1, 9, 37);
        let p = pack_ternary(&b).unwrap();
        for &w in p.words() {
            for s in 0..16 {
                assert_ne!((w >> (2 * s)) & 0b11, 0b10);
            }
        }
    }

    #[test]
    fn gemm_ternary_examples() {
        let a = Matrix::from_vec(1, 3, vec![3u8, 5, 7]).unwrap();
        let b = pack_ternary(&Matrix::from_vec(3, 1, vec![-1, 0, 1]).unwrap()).unwrap();
        assert_eq!(gemm_ternary(&a, &b).unwrap().data(), &[4]);

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (a, _) = random_operands(&mut rng, 6, 1, 20);
        let z = pack_ternary(&Matrix::zeros(20, 3)).unwrap();
        assert!(gemm_ternary(&a, &z).unwrap().data().iter().all(|&v| v == 0));

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (a, b) = random_operands(&mut rng, 16, 16, 16);
        let c = gemm_ternary(&a, &pack_ternary(&b).unwrap()).unwrap();
        assert_eq!(c, mac_oracle(&a, &b));
    }

    #[test]
    fn gemm_ternary_errors() {
        let a = Matrix::from_vec(1, 2, vec![1u8, 2]).unwrap();
        let b = pack_ternary(&Matrix::zeros(3, 1)).unwrap();
        assert!(matches!(gemm_ternary(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(check_depth(MAX_DEPTH).is_ok());
        assert!(matches!(
            check_depth(MAX_DEPTH + 1),
            Err(Error::OverflowRisk { .. })
        ));
        let bad = PackedTernaryMatrix::from_words(2, 1, vec![0b10_00]).unwrap();
        assert_eq!(
            gemm_ternary(&a, &bad).unwrap_err(),
            Error::CorruptedField { row: 1, col: 0 }
        );
    }

    #[test]
    fn gemm_ternary_oracle_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..300 {
            let m = rng.random_range(1..=64);
            let n = rng.random_range(1..=64);
            let k = rng.random_range(1..=64);
            let (a, b) = random_operands(&mut rng, m, n, k);
            let c = gemm_ternary(&a, &pack_ternary(&b).unwrap()).unwrap();
            assert_eq!(c, mac_oracle(&a, &b));
            let bound = (k * 255) as i32;
            assert!(c.data().iter().all(|v| v.abs() <= bound));
            let neg = b.map(|&v| -v);
            let cn = gemm_ternary(&a, &pack_ternary(&neg).unwrap()).unwrap();
            assert_eq!(cn, c.map(|&v| -v));
        }
    }

    #[test]
    fn gemm_ternary_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let (m, n, k) = (5, 6, 23);
            let (a, _) = random_operands(&mut rng, m, n, k);
            // split a ternary matrix into two ternary parts with disjoint support
            let (_, b) = random_operands(&mut rng, m, n, k);
            let mask: Vec<bool> = (0..k * n).map(|_| rng.random()).collect();
            let b1 = Matrix::from_vec(k, n, b.data().iter().zip(&mask).map(|(&v, &s)| if s { v } else { 0 }).collect()).unwrap();
            let b2 = Matrix::from_vec(k, n, b.data().iter().zip(&mask).map(|(&v, &s)| if s { 0 } else { v }).collect()).unwrap();
            let c1 = gemm_ternary(&a, &pack_ternary(&b1).unwrap()).unwrap();
            let c2 = gemm_ternary(&a, &pack_ternary(&b2).unwrap()).unwrap();
            let sum: Vec<i32> = c1.data().iter().zip(c2.data()).map(|(x, y)| x + y).collect();
            assert_eq!(sum, mac_oracle(&a, &b).into_vec());
        }
    }

    #[test]
    fn gemm_ref_examples() {
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 4.0, 0.0, 3.0]).unwrap();
        assert_eq!(gemm_ref(&Matrix::identity(2), &x).unwrap(), x);
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![5.0, 6.0]).unwrap();
        assert_eq!(gemm_ref(&a, &b).unwrap().data(), &[17.0, 39.0]);
        let z = gemm_ref(&Matrix::zeros(3, 2), &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(gemm_ref(&x, &x).is_err());
    }

    #[test]
    fn im2col_examples() {
        let input = FeatureMap::from_vec(3, 3, 1, (1..=9).map(|v| v as f64).collect()).unwrap();
        let cols = im2col(&input, ConvGeometry::square(2, 1, 0)).unwrap();
        assert_eq!((cols.rows(), cols.cols()), (4, 4));
        assert_eq!(cols.row(0), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(cols.row(3), &[5.0, 6.0, 8.0, 9.0]);

        let input = FeatureMap::from_vec(2, 3, 2, (0..12).map(|v| v as f64).collect()).unwrap();
        let cols = im2col(&input, ConvGeometry::square(1, 1, 0)).unwrap();
        assert_eq!((cols.rows(), cols.cols()), (6, 2));
        assert_eq!(cols.data(), input.data());

        let small = FeatureMap::from_vec(2, 2, 1, vec![0.0; 4]).unwrap();
        assert!(matches!(
            im2col(&small, ConvGeometry::square(3, 1, 0)),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn im2col_padding_and_stride() {
        let input = FeatureMap::from_vec(3, 3, 1, (1..=9).map(|v| v as f64).collect()).unwrap();
        let cols = im2col(&input, ConvGeometry::square(3, 2, 1)).unwrap();
        // out dims floor((3+2-3)/2)+1 = 2
        assert_eq!((cols.rows(), cols.cols()), (4, 9));
        assert_eq!(cols.row(0), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    fn direct_conv(input: &FeatureMap<f64>, w: &ConvWeights, stride: usize, pad: usize) -> FeatureMap<f64> {
        let geom = ConvGeometry { kh: w.kh, kw: w.kw, stride, pad };
        let (oh, ow) = geom.output_dims(input.height(), input.width()).unwrap();
        let mut out = vec![0.0; oh * ow * w.out_channels];
        for oy in 0..oh {
            for ox in 0..ow {
                for f in 0..w.out_channels {
                    let mut s = 0.0;
                    for dy in 0..w.kh {
                        for dx in 0..w.kw {
                            let y = (oy * stride + dy) as isize - pad as isize;
                            let x = (ox * stride + dx) as isize - pad as isize;
                            if y < 0 || x < 0 || y >= input.height() as isize || x >= input.width() as isize {
                                continue;
                            }
                            for c in 0..w.in_channels {
                                let wi = ((dy * w.kw + dx) * w.in_channels + c) * w.out_channels + f;
                                s += input.get(y as usize, x as usize, c) * w.data[wi];
                            }
                        }
                    }
                    out[(oy * ow + ox) * w.out_channels + f] = s;
                }
            }
        }
        FeatureMap::from_vec(oh, ow, w.out_channels, out).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> FeatureMap<f64> {
        FeatureMap::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn random_filters(rng: &mut ChaCha8Rng, k: usize, c: usize, f: usize) -> ConvWeights {
        ConvWeights::new(k, k, c, f, (0..k * k * c * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for &(h, w, c, k, f, s, p) in &[(8, 8, 3, 3, 4, 1, 1), (7, 9, 2, 3, 5, 2, 0), (5, 5, 1, 5, 2, 1, 2), (6, 4, 4, 1, 3, 1, 0)] {
            let input = random_map(&mut rng, h, w, c, -1.0, 1.0);
            let wts = random_filters(&mut rng, k, c, f);
            let cols = im2col(&input, ConvGeometry::square(k, s, p)).unwrap();
            let got = gemm_ref(&cols, &wts.as_matrix()).unwrap();
            let want = direct_conv(&input, &wts, s, p);
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let geom = ConvGeometry::square(3, 2, 1);
        let x = random_map(&mut rng, 7, 6, 2, -1.0, 1.0);
        let cols = im2col(&x, geom).unwrap();
        let y = Matrix::from_vec(cols.rows(), cols.cols(), (0..cols.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, 7, 6, 2, geom).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn float_pipeline(input: &FeatureMap<f64>, w: &ConvWeights, spec: QuantSpec, s: usize, p: usize) -> FeatureMap<f64> {
        let a = quant::fake_quantize_activations(input.data(), spec.act_bits()).unwrap();
        let wq = quant::fake_quantize_weights(&w.data, spec.weight_bits()).unwrap();
        let amap = FeatureMap::from_vec(input.height(), input.width(), input.channels(), a).unwrap();
        let wq = ConvWeights::new(w.kh, w.kw, w.in_channels, w.out_channels, wq).unwrap();
        direct_conv(&amap, &wq, s, p)
    }

    #[test]
    fn conv2d_lowprec_examples() {
        let spec = QuantSpec::new(2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_map(&mut rng, 4, 4, 1, 0.0, 1.0);
        let ones = ConvWeights::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let out = conv2d_lowprec(&input, &ones, spec, 1, 0).unwrap();
        let expect = quant::fake_quantize_activations(input.data(), 8).unwrap();
        for (g, e) in out.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }

        let zeros = ConvWeights::new(3, 3, 1, 2, vec![0.0; 18]).unwrap();
        let out = conv2d_lowprec(&input, &zeros, spec, 1, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_map(&mut rng, 8, 8, 1, -0.2, 1.2);
        let w = random_filters(&mut rng, 3, 1, 4);
        let got = conv2d_lowprec(&input, &w, spec, 1, 0).unwrap();
        let want = float_pipeline(&input, &w, spec, 1, 0);
        assert_eq!((got.height(), got.width(), got.channels()), (6, 6, 4));
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() <= 1e-6);
        }
    }

    #[test]
    fn conv2d_lowprec_other_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let input = random_map(&mut rng, 6, 6, 2, -0.2, 1.2);
        let w = random_filters(&mut rng, 3, 2, 3);
        for &(wb, ab) in &[(4, 8), (8, 8), (2, 16), (32, 8), (4, 32), (32, 32)] {
            let spec = QuantSpec::new(wb, ab).unwrap();
            let got = conv2d_lowprec(&input, &w, spec, 2, 1).unwrap();
            let want = float_pipeline(&input, &w, spec, 2, 1);
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() <= 1e-6, "{wb}/{ab}: {g} vs {e}");
            }
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(k in 1usize..40, n in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, b) = random_operands(&mut rng, 1, n, k);
            let p = pack_ternary(&b).unwrap();
            prop_assert_eq!(p.words().len(), k.div_ceil(16) * n);
            prop_assert_eq!(unpack_ternary(&p).unwrap(), b);
        }
    }
}
