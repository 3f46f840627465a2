//! Blockwise weight quantization: symmetric 8-bit absmax and 4-bit NF4, with
//! optional double quantization of the per-block scales.
//!
//! Tensors are split into contiguous blocks of `block_size` elements in
//! row-major order (the last block may be short). Each block stores one scale.
//! Quantized tensors are immutable; compute paths dequantize rows on the fly.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{ModelWeights, WeightTensor};
use crate::tensor::io::{Payload, Record};
use crate::tensor::{kernels, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DOUBLE_QUANT_GROUP: usize = 256;

/// NF4 levels from the QLoRA reference implementation (bitsandbytes), ascending.
#[allow(clippy::excessive_precision)]
pub const NF4_CODEBOOK: [f32; 16] = [
    -1.0,
    -0.696_192_800_998_687_7,
    -0.525_073_051_452_636_7,
    -0.394_917_488_098_144_53,
    -0.284_441_381_692_886_35,
    -0.184_773_430_228_233_34,
    -0.091_050_036_251_544_95,
    0.0,
    0.079_580_299_556_255_34,
    0.160_930_201_411_247_25,
    0.246_112_301_945_686_34,
    0.337_915_241_718_292_24,
    0.440_709_829_330_444_34,
    0.562_617_003_917_694_1,
    0.722_956_836_223_602_3,
    1.0,
];

pub const NF4_ZERO_CODE: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Int8Absmax,
    Nf4,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Int8Absmax => "int8",
            Scheme::Nf4 => "nf4",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int8" | "int8_absmax" => Ok(Scheme::Int8Absmax),
            "nf4" => Ok(Scheme::Nf4),
            other => Err(Error::Config(format!("unknown quantization scheme {other:?}"))),
        }
    }
}

/// Frozen-base treatment during training and serving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseQuant {
    #[default]
    None,
    Int8,
    Nf4,
}

impl BaseQuant {
    pub fn scheme(self) -> Option<Scheme> {
        match self {
            BaseQuant::None => None,
            BaseQuant::Int8 => Some(Scheme::Int8Absmax),
            BaseQuant::Nf4 => Some(Scheme::Nf4),
        }
    }
}

impl fmt::Display for BaseQuant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scheme() {
            Some(s) => s.fmt(f),
            None => f.write_str("none"),
        }
    }
}

impl FromStr for BaseQuant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "f32" => Ok(BaseQuant::None),
            other => Ok(match other.parse::<Scheme>()? {
                Scheme::Int8Absmax => BaseQuant::Int8,
                Scheme::Nf4 => BaseQuant::Nf4,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codes {
    Int8(Vec<i8>),
    /// Two 4-bit codes per byte, low nibble first.
    Packed4(Vec<u8>),
}

/// Second-level quantization of first-level block scales.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleQuantScales {
    pub scale_codes: Vec<i8>,
    pub meta_scales: Vec<f32>,
    pub group_size: usize,
}

impl DoubleQuantScales {
    pub fn quantize(scales: &[f32], group_size: usize) -> Self {
        let mut scale_codes = Vec::with_capacity(scales.len());
        let mut meta_scales = Vec::with_capacity(scales.len().div_ceil(group_size));
        for group in scales.chunks(group_size) {
            let meta = group.iter().copied().fold(0.0f32, f32::max);
            meta_scales.push(meta);
            for &s in group {
                let code = if meta == 0.0 {
                    0
                } else {
                    (f64::from(s) * 127.0 / f64::from(meta)).round().clamp(0.0, 127.0) as i8
                };
                scale_codes.push(code);
            }
        }
        Self {
            scale_codes,
            meta_scales,
            group_size,
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.scale_codes
            .iter()
            .enumerate()
            .map(|(i, &c)| f32::from(c) * (self.meta_scales[i / self.group_size] / 127.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scales {
    Plain(Vec<f32>),
    Double(DoubleQuantScales),
}

#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    name: String,
    shape: Vec<usize>,
    scheme: Scheme,
    block_size: usize,
    codes: Codes,
    scales: Scales,
    /// First-level scales as used by dequantization.
    effective: Vec<f32>,
}

impl PartialEq for QuantizedTensor {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.scheme == other.scheme
            && self.block_size == other.block_size
            && self.codes == other.codes
            && self.scales == other.scales
    }
}

fn check_finite(x: &Tensor) -> Result<()> {
    match x.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Data(format!(
            "cannot quantize non-finite value {} at index {i}",
            x.data()[i]
        ))),
        None => Ok(()),
    }
}

fn check_block(block_size: usize) -> Result<()> {
    if block_size == 0 {
        return Err(Error::Config("block_size must be positive".into()));
    }
    Ok(())
}

fn absmax(block: &[f32]) -> f32 {
    block.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Index of the nearest NF4 level to `v` (ties go to the lower index).
pub fn nf4_code(v: f32) -> u8 {
    let upper = NF4_CODEBOOK.partition_point(|&level| level < v);
    if upper == 0 {
        return 0;
    }
    if upper == NF4_CODEBOOK.len() {
        return 15;
    }
    let lo = upper - 1;
    if (v - NF4_CODEBOOK[lo]).abs() <= (v - NF4_CODEBOOK[upper]).abs() {
        lo as u8
    } else {
        upper as u8
    }
}

/// Largest gap between adjacent NF4 levels.
pub fn nf4_max_gap() -> f32 {
    NF4_CODEBOOK
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f32::max)
}

pub fn quantize_int8(x: &Tensor, block_size: usize) -> Result<QuantizedTensor> {
    quantize_int8_named(x, block_size, "")
}

pub fn quantize_int8_named(x: &Tensor, block_size: usize, name: &str) -> Result<QuantizedTensor> {
    check_block(block_size)?;
    check_finite(x)?;
    let mut codes = Vec::with_capacity(x.numel());
    let mut scales = Vec::with_capacity(x.numel().div_ceil(block_size));
    for block in x.data().chunks(block_size) {
        let amax = absmax(block);
        scales.push(amax / 127.0);
        for &v in block {
            let code = if amax == 0.0 {
                0
            } else {
                (f64::from(v) * 127.0 / f64::from(amax))
                    .round()
                    .clamp(-127.0, 127.0) as i8
            };
            codes.push(code);
        }
    }
    QuantizedTensor::from_parts(
        name,
        x.shape().to_vec(),
        Scheme::Int8Absmax,
        block_size,
        Codes::Int8(codes),
        Scales::Plain(scales),
    )
}

pub fn quantize_nf4(x: &Tensor, block_size: usize, double_quant: bool) -> Result<QuantizedTensor> {
    quantize_nf4_named(x, block_size, double_quant, "")
}

pub fn quantize_nf4_named(
    x: &Tensor,
    block_size: usize,
    double_quant: bool,
    name: &str,
) -> Result<QuantizedTensor> {
    check_block(block_size)?;
    check_finite(x)?;
    let mut packed = vec![0u8; x.numel().div_ceil(2)];
    let mut scales = Vec::with_capacity(x.numel().div_ceil(block_size));
    for (b, block) in x.data().chunks(block_size).enumerate() {
        let amax = absmax(block);
        scales.push(amax);
        for (j, &v) in block.iter().enumerate() {
            let code = if amax == 0.0 {
                NF4_ZERO_CODE
            } else {
                nf4_code(v / amax)
            };
            let i = b * block_size + j;
            packed[i / 2] |= code << (4 * (i % 2));
        }
    }
    let scales = if double_quant {
        Scales::Double(DoubleQuantScales::quantize(&scales, DOUBLE_QUANT_GROUP))
    } else {
        Scales::Plain(scales)
    };
    QuantizedTensor::from_parts(
        name,
        x.shape().to_vec(),
        Scheme::Nf4,
        block_size,
        Codes::Packed4(packed),
        scales,
    )
}

impl QuantizedTensor {
    /// Assembles a quantized tensor from stored parts, validating code ranges
    /// and lengths.
    pub fn from_parts(
        name: &str,
        shape: Vec<usize>,
        scheme: Scheme,
        block_size: usize,
        codes: Codes,
        scales: Scales,
    ) -> Result<Self> {
        check_block(block_size)?;
        let numel: usize = shape.iter().product();
        let n_blocks = numel.div_ceil(block_size);
        match (&codes, scheme) {
            (Codes::Int8(c), Scheme::Int8Absmax) => {
                if c.len() != numel {
                    return Err(Error::Format(format!(
                        "{name}: {} int8 codes for {numel} elements",
                        c.len()
                    )));
                }
                if c.contains(&i8::MIN) {
                    return Err(Error::Format(format!("{name}: int8 code -128 out of range")));
                }
            }
            (Codes::Packed4(c), Scheme::Nf4) => {
                if c.len() != numel.div_ceil(2) {
                    return Err(Error::Format(format!(
                        "{name}: {} packed bytes for {numel} elements",
                        c.len()
                    )));
                }
            }
            _ => {
                return Err(Error::Format(format!(
                    "{name}: code storage does not match scheme {scheme}"
                )))
            }
        }
        let effective = match &scales {
            Scales::Plain(s) => s.clone(),
            Scales::Double(dq) => {
                if dq.group_size == 0
                    || dq.meta_scales.len() != dq.scale_codes.len().div_ceil(dq.group_size)
                {
                    return Err(Error::Format(format!("{name}: inconsistent meta scales")));
                }
                if dq.scale_codes.iter().any(|&c| c < 0) {
                    return Err(Error::Format(format!("{name}: negative scale code")));
                }
                dq.dequantize()
            }
        };
        if effective.len() != n_blocks {
            return Err(Error::Format(format!(
                "{name}: {} scales for {n_blocks} blocks",
                effective.len()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            shape,
            scheme,
            block_size,
            codes,
            scales,
            effective,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn codes(&self) -> &Codes {
        &self.codes
    }

    pub fn scales(&self) -> &Scales {
        &self.scales
    }

    /// First-level scale per block, after undoing double quantization.
    pub fn block_scales(&self) -> &[f32] {
        &self.effective
    }

    pub fn is_double_quant(&self) -> bool {
        matches!(self.scales, Scales::Double(_))
    }

    pub(crate) fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn code(&self, i: usize) -> i32 {
        match &self.codes {
            Codes::Int8(c) => i32::from(c[i]),
            Codes::Packed4(c) => i32::from((c[i / 2] >> (4 * (i % 2))) & 0x0f),
        }
    }

    #[inline]
    fn value(&self, i: usize) -> f32 {
        let scale = self.effective[i / self.block_size];
        match &self.codes {
            Codes::Int8(c) => f32::from(c[i]) * scale,
            Codes::Packed4(c) => NF4_CODEBOOK[((c[i / 2] >> (4 * (i % 2))) & 0x0f) as usize] * scale,
        }
    }

    pub(crate) fn dequantize_range_into(&self, start: usize, out: &mut [f32]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.value(start + j);
        }
    }

    /// Row `p` of a rank-2 quantized matrix.
    pub(crate) fn dequantize_row_into(&self, p: usize, out: &mut [f32]) {
        let n = self.cols();
        self.dequantize_range_into(p * n, &mut out[..n]);
    }

    /// Bytes needed to store this tensor (codes, scales and meta scales).
    pub fn storage_bytes(&self) -> usize {
        let codes = match &self.codes {
            Codes::Int8(c) => c.len(),
            Codes::Packed4(c) => c.len(),
        };
        let scales = match &self.scales {
            Scales::Plain(s) => 4 * s.len(),
            Scales::Double(dq) => dq.scale_codes.len() + 4 * dq.meta_scales.len(),
        };
        codes + scales
    }

    /// Container records: the codes under the tensor name plus scale payloads.
    pub fn to_records(&self) -> Vec<Record> {
        let name = &self.name;
        let codes = match &self.codes {
            Codes::Int8(c) => Payload::I8(c.clone()),
            Codes::Packed4(c) => Payload::Packed4(c.clone()),
        };
        let mut out = vec![Record {
            name: name.clone(),
            dims: self.shape.clone(),
            payload: codes,
        }];
        match &self.scales {
            Scales::Plain(s) => out.push(Record {
                name: format!("{name}.scales"),
                dims: vec![s.len()],
                payload: Payload::F32(s.clone()),
            }),
            Scales::Double(dq) => {
                out.push(Record {
                    name: format!("{name}.scale_codes"),
                    dims: vec![dq.scale_codes.len()],
                    payload: Payload::I8(dq.scale_codes.clone()),
                });
                out.push(Record {
                    name: format!("{name}.meta_scales"),
                    dims: vec![dq.meta_scales.len()],
                    payload: Payload::F32(dq.meta_scales.clone()),
                });
            }
        }
        out
    }

    /// Metadata line value: `scheme,block_size[,dq]`.
    pub fn meta_string(&self) -> String {
        let mut s = format!("{},{}", self.scheme, self.block_size);
        if let Scales::Double(dq) = &self.scales {
            s.push_str(&format!(",dq{}", dq.group_size));
        }
        s
    }
}

pub(crate) struct QuantMeta {
    pub scheme: Scheme,
    pub block_size: usize,
    pub dq_group: Option<usize>,
}

pub(crate) fn parse_meta(value: &str) -> Result<QuantMeta> {
    let parts: Vec<&str> = value.split(',').collect();
    let bad = || Error::Format(format!("bad quantization metadata {value:?}"));
    let (scheme, block) = match parts.as_slice() {
        [s, b] | [s, b, _] => (s.parse::<Scheme>()?, b.parse::<usize>().map_err(|_| bad())?),
        _ => return Err(bad()),
    };
    let dq_group = match parts.get(2) {
        Some(g) => Some(
            g.strip_prefix("dq")
                .and_then(|n| n.parse().ok())
                .ok_or_else(bad)?,
        ),
        None => None,
    };
    Ok(QuantMeta {
        scheme,
        block_size: block,
        dq_group,
    })
}

impl QuantizedTensor {
    pub(crate) fn from_records(
        code_rec: &Record,
        lookup: impl Fn(&str) -> Option<Record>,
        meta: &QuantMeta,
    ) -> Result<Self> {
        let name = &code_rec.name;
        let missing = |what: &str| Error::Format(format!("{name}: missing {what}"));
        let codes = match &code_rec.payload {
            Payload::I8(c) => Codes::Int8(c.clone()),
            Payload::Packed4(c) => Codes::Packed4(c.clone()),
            Payload::F32(_) => return Err(Error::Format(format!("{name}: codes stored as f32"))),
        };
        let f32s = |r: Record| match r.payload {
            Payload::F32(v) => Ok(v),
            _ => Err(Error::Format(format!("{}: expected f32 payload", r.name))),
        };
        let scales = match meta.dq_group {
            None => Scales::Plain(f32s(
                lookup(&format!("{name}.scales")).ok_or_else(|| missing("scales"))?,
            )?),
            Some(group_size) => {
                let codes_rec =
                    lookup(&format!("{name}.scale_codes")).ok_or_else(|| missing("scale codes"))?;
                let Payload::I8(scale_codes) = codes_rec.payload else {
                    return Err(Error::Format(format!("{name}: scale codes must be i8")));
                };
                let meta_scales = f32s(
                    lookup(&format!("{name}.meta_scales")).ok_or_else(|| missing("meta scales"))?,
                )?;
                Scales::Double(DoubleQuantScales {
                    scale_codes,
                    meta_scales,
                    group_size,
                })
            }
        };
        Self::from_parts(
            name,
            code_rec.dims.clone(),
            meta.scheme,
            meta.block_size,
            codes,
            scales,
        )
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let mut out = vec![0.0f32; q.numel()];
    q.dequantize_range_into(0, &mut out);
    Tensor::new(q.shape.clone(), out).expect("shape checked at construction")
}

pub(crate) fn qmatmul_raw(x: &[f32], m: usize, k: usize, w: &QuantizedTensor) -> Result<Vec<f32>> {
    let [rows, n] = w.shape[..] else {
        return Err(Error::shape("qmatmul", &[m, k], &w.shape));
    };
    if rows != k {
        return Err(Error::shape("qmatmul", &[m, k], &w.shape));
    }
    let mut out = vec![0.0f32; m * n];
    let mut row = vec![0.0f32; n];
    for p in 0..k {
        w.dequantize_row_into(p, &mut row);
        for i in 0..m {
            kernels::axpy(x[i * k + p], &row, &mut out[i * n..(i + 1) * n]);
        }
    }
    Ok(out)
}

/// `x · dequantize(w)`, computed one dequantized row of `w` at a time.
/// Bitwise equal to `x.matmul(&dequantize(w))`.
pub fn qmatmul(x: &Tensor, w: &QuantizedTensor) -> Result<Tensor> {
    let (m, k) = x.dims2("qmatmul")?;
    let out = qmatmul_raw(x.data(), m, k, w)?;
    Tensor::new(vec![m, w.cols()], out)
}

/// Quantizes `x` by scheme; NF4 uses double quantization when `double_quant`.
pub fn quantize(
    x: &Tensor,
    scheme: Scheme,
    block_size: usize,
    double_quant: bool,
    name: &str,
) -> Result<QuantizedTensor> {
    match scheme {
        Scheme::Int8Absmax => quantize_int8_named(x, block_size, name),
        Scheme::Nf4 => quantize_nf4_named(x, block_size, double_quant, name),
    }
}

/// Whether a base tensor is stored quantized under a quantized export: every
/// matrix is, norm gains stay in f32.
pub fn is_quantizable(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && !name.starts_with("lora.")
}

/// Quantizes every matrix of `weights`; norm vectors stay dense. Already
/// quantized tensors are kept as they are.
pub fn quantize_weights(weights: &ModelWeights, scheme: Scheme, block_size: usize) -> Result<ModelWeights> {
    let mut out = weights.clone();
    out.set_origin_fingerprint(weights.origin_fingerprint());
    for (name, w) in out.iter_mut() {
        if let WeightTensor::Dense(t) = w {
            if is_quantizable(name, t.shape()) {
                let q = quantize(t, scheme, block_size, scheme == Scheme::Nf4, name)?;
                *w = WeightTensor::Quantized(Arc::new(q));
            }
        }
    }
    Ok(out)
}

/// Dense copy of `weights` with every quantized tensor dequantized.
pub fn dequantize_weights(weights: &ModelWeights) -> ModelWeights {
    let mut out = weights.clone();
    for (_, w) in out.iter_mut() {
        if let WeightTensor::Quantized(q) = w {
            *w = WeightTensor::Dense(dequantize(q));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorMemory {
    pub name: String,
    pub numel: usize,
    pub f32_bytes: usize,
    pub int8_bytes: usize,
    pub nf4_dq_bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryReport {
    pub tensors: Vec<TensorMemory>,
    pub f32_bytes: usize,
    pub int8_bytes: usize,
    pub nf4_dq_bytes: usize,
}

impl MemoryReport {
    pub fn bytes(&self, scheme: BaseQuant) -> usize {
        match scheme {
            BaseQuant::None => self.f32_bytes,
            BaseQuant::Int8 => self.int8_bytes,
            BaseQuant::Nf4 => self.nf4_dq_bytes,
        }
    }

    /// f32 bytes over bytes under `scheme`; 0 for an empty model.
    pub fn compression_ratio(&self, scheme: BaseQuant) -> f64 {
        let b = self.bytes(scheme);
        if b == 0 {
            0.0
        } else {
            self.f32_bytes as f64 / b as f64
        }
    }
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frozen base: {} tensors", self.tensors.len())?;
        writeln!(f, "  f32      {:>12} bytes", self.f32_bytes)?;
        writeln!(
            f,
            "  int8     {:>12} bytes  (x{:.3})",
            self.int8_bytes,
            self.compression_ratio(BaseQuant::Int8)
        )?;
        write!(
            f,
            "  nf4+dq   {:>12} bytes  (x{:.3})",
            self.nf4_dq_bytes,
            self.compression_ratio(BaseQuant::Nf4)
        )
    }
}

/// Byte accounting for storing `numel` elements with blocks of `block_size`.
pub fn int8_bytes(numel: usize, block_size: usize) -> usize {
    numel + 4 * numel.div_ceil(block_size)
}

pub fn nf4_dq_bytes(numel: usize, block_size: usize) -> usize {
    let blocks = numel.div_ceil(block_size);
    numel.div_ceil(2) + blocks + 4 * blocks.div_ceil(DOUBLE_QUANT_GROUP)
}

/// Frozen-base storage under each scheme. Counted from element counts, so the
/// report is the same whether `weights` is currently dense or quantized.
pub fn memory_report(weights: &ModelWeights, block_size: usize) -> MemoryReport {
    let mut report = MemoryReport::default();
    for (name, w) in weights.iter() {
        let numel = w.numel();
        let f32_bytes = 4 * numel;
        let (int8, nf4) = if is_quantizable(name, w.shape()) {
            (int8_bytes(numel, block_size), nf4_dq_bytes(numel, block_size))
        } else {
            (f32_bytes, f32_bytes)
        };
        report.f32_bytes += f32_bytes;
        report.int8_bytes += int8;
        report.nf4_dq_bytes += nf4;
        report.tensors.push(TensorMemory {
            name: name.to_string(),
            numel,
            f32_bytes,
            int8_bytes: int8,
            nf4_dq_bytes: nf4,
        });
    }
    report
}
