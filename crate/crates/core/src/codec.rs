//! Transmission codec: layer superposition into one `r_a x r_a` matrix,
//! column-major vectorization, stochastic-rounding quantization and the
//! inverse path back to full-size weight increments.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{ensure, invalid, Error, Result};
use crate::projector::{Combiner, ProjectorPair};

/// Bit-width sentinel meaning "send raw values".
pub const LOSSLESS_BITS: u8 = 32;
/// Bits spent on the per-payload scale.
pub const SCALE_BITS: u64 = 32;
/// `gnb_id` used in the header of the server's broadcast.
pub const BROADCAST_ID: u32 = u32::MAX;

/// Snap tolerance, in grid units, below which a value counts as a grid point.
const GRID_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ConsolidatedUpdate {
    pub data: DMatrix<f64>,
    pub round_index: u32,
    /// `None` for the global broadcast.
    pub gnb_id: Option<u32>,
}

impl ConsolidatedUpdate {
    pub fn new(data: DMatrix<f64>) -> Self {
        Self { data, round_index: 0, gnb_id: None }
    }
}

/// `sum_l V_l A_l V_l^T`.
pub fn combine_layers(compressed: &[DMatrix<f64>], comb: &Combiner) -> Result<ConsolidatedUpdate> {
    ensure(compressed.len() == comb.n_layers, || {
        format!("got {} layer updates for a {}-layer combiner", compressed.len(), comb.n_layers)
    })?;
    let mut out = DMatrix::zeros(comb.r_a, comb.r_a);
    for (l, (a, vl)) in compressed.iter().zip(comb.blocks()).enumerate() {
        ensure(a.shape() == (comb.rank, comb.rank), || {
            format!("layer {l} update is {:?}, expected {}x{}", a.shape(), comb.rank, comb.rank)
        })?;
        out += vl * a * vl.transpose();
    }
    Ok(ConsolidatedUpdate::new(out))
}

/// `V_l^T D V_l` for 0-based layer `layer`.
pub fn recover_layer(cons: &ConsolidatedUpdate, comb: &Combiner, layer: usize) -> Result<DMatrix<f64>> {
    let vl = comb.block(layer)?;
    ensure(cons.data.shape() == (comb.r_a, comb.r_a), || {
        format!("consolidated update is {:?}, expected {}x{}", cons.data.shape(), comb.r_a, comb.r_a)
    })?;
    Ok(vl.transpose() * &cons.data * vl)
}

/// `P^T X Q^T`.
pub fn up_project(recovered: &DMatrix<f64>, proj: &ProjectorPair) -> Result<DMatrix<f64>> {
    ensure(recovered.shape() == (proj.rank, proj.rank), || {
        format!("recovered update is {:?}, expected {}x{}", recovered.shape(), proj.rank, proj.rank)
    })?;
    Ok(proj.p.transpose() * recovered * proj.q.transpose())
}

/// Column-major flattening.
pub fn vectorize(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Inverse of [`vectorize`] for a square `n x n` matrix.
pub fn devectorize(v: &[f64], n: usize) -> Result<DMatrix<f64>> {
    ensure(v.len() == n * n, || format!("vector of length {} cannot form a {n}x{n} matrix", v.len()))?;
    Ok(DMatrix::from_column_slice(n, n, v))
}

#[derive(Debug, Clone, PartialEq)]
pub enum PayloadBody {
    /// Grid indices, each `< 2^q`.
    Codes(Vec<u32>),
    /// Lossless bypass.
    Raw(Vec<f64>),
}

/// Stochastically rounded vector plus its scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPayload {
    pub gnb_id: u32,
    pub round: u32,
    pub q: u8,
    /// Max-abs of the source vector.
    pub scale: f64,
    pub body: PayloadBody,
}

impl QuantizedPayload {
    pub fn len(&self) -> usize {
        match &self.body {
            PayloadBody::Codes(c) => c.len(),
            PayloadBody::Raw(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `q * n + 32`.
    pub fn bit_count(&self) -> u64 {
        payload_bits(self.q, self.len())
    }

    pub fn with_header(mut self, gnb_id: u32, round: u32) -> Self {
        self.gnb_id = gnb_id;
        self.round = round;
        self
    }
}

/// Bits on the wire for `n` values at bit-width `q`.
pub fn payload_bits(q: u8, n: usize) -> u64 {
    q as u64 * n as u64 + SCALE_BITS
}

fn levels(q: u8) -> u64 {
    (1u64 << q) - 1
}

/// Stochastic rounding onto `2^q` uniformly spaced levels spanning
/// `[-scale, scale]`; `q = 32` bypasses quantization.
pub fn quantize_sr<R: Rng + ?Sized>(v: &[f64], q: u8, rng: &mut R) -> Result<QuantizedPayload> {
    ensure((1..=LOSSLESS_BITS).contains(&q), || format!("bit-width q={q} must be in 1..=32"))?;
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(invalid(format!("non-finite input at index {i}")));
    }
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let body = if q == LOSSLESS_BITS {
        PayloadBody::Raw(v.to_vec())
    } else if scale == 0.0 {
        PayloadBody::Codes(vec![0; v.len()])
    } else {
        let top = levels(q);
        let half = top as f64 / 2.0;
        PayloadBody::Codes(
            v.iter()
                .map(|&x| {
                    let pos = ((x / scale).clamp(-1.0, 1.0) + 1.0) * half;
                    let nearest = pos.round();
                    let code = if (pos - nearest).abs() <= GRID_SNAP {
                        nearest as u64
                    } else {
                        let lower = pos.floor();
                        let up = rng.random::<f64>() < pos - lower;
                        lower as u64 + up as u64
                    };
                    code.min(top) as u32
                })
                .collect(),
        )
    };
    Ok(QuantizedPayload { gnb_id: 0, round: 0, q, scale, body })
}

/// `-scale + code * 2 scale / (2^q - 1)`, evaluated so that the end codes
/// land exactly on `-scale` and `+scale`.
pub fn dequantize(p: &QuantizedPayload) -> Vec<f64> {
    match &p.body {
        PayloadBody::Raw(r) => r.clone(),
        PayloadBody::Codes(codes) => {
            let top = levels(p.q) as f64;
            codes.iter().map(|&c| p.scale * ((2.0 * c as f64 - top) / top)).collect()
        }
    }
}

const HEADER_LEN: usize = 4 + 4 + 1 + 2 + 4;

/// Little-endian wire encoding: `{gnb_id u32, round u32, q u8, r_a u16,
/// scale f32}` followed by the codes packed `q` bits each, LSB first.
/// Raw payloads carry each value as its `f32` bit pattern.
pub fn encode_payload(p: &QuantizedPayload) -> Result<Vec<u8>> {
    let n = p.len();
    let r_a = (n as f64).sqrt().round() as usize;
    ensure(r_a * r_a == n, || format!("payload length {n} is not a square"))?;
    let r_a = u16::try_from(r_a).map_err(|_| invalid(format!("r_a={r_a} exceeds u16")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + (p.bit_count() as usize).div_ceil(8));
    out.extend_from_slice(&p.gnb_id.to_le_bytes());
    out.extend_from_slice(&p.round.to_le_bytes());
    out.push(p.q);
    out.extend_from_slice(&r_a.to_le_bytes());
    out.extend_from_slice(&(p.scale as f32).to_le_bytes());

    let words: Box<dyn Iterator<Item = u32> + '_> = match &p.body {
        PayloadBody::Codes(c) => Box::new(c.iter().copied()),
        PayloadBody::Raw(r) => Box::new(r.iter().map(|&x| (x as f32).to_bits())),
    };
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for w in words {
        acc |= (w as u64) << filled;
        filled += p.q as u32;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

/// Inverse of [`encode_payload`]. The scale comes back at `f32` precision.
pub fn decode_payload(bytes: &[u8]) -> Result<QuantizedPayload> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("payload of {} bytes is shorter than its header", bytes.len())));
    }
    let gnb_id = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let round = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let q = bytes[8];
    let r_a = u16::from_le_bytes(bytes[9..11].try_into().unwrap()) as usize;
    let scale = f32::from_le_bytes(bytes[11..15].try_into().unwrap()) as f64;
    if !(1..=LOSSLESS_BITS).contains(&q) {
        return Err(Error::Format(format!("bit-width {q} out of range")));
    }
    let n = r_a * r_a;
    let body_len = (q as usize * n).div_ceil(8);
    if bytes.len() != HEADER_LEN + body_len {
        return Err(Error::Format(format!(
            "expected {} body bytes for {n} codes at {q} bits, found {}",
            body_len,
            bytes.len() - HEADER_LEN
        )));
    }
    let mask: u64 = (1u64 << q) - 1;
    let mut words = Vec::with_capacity(n);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut body = bytes[HEADER_LEN..].iter();
    while words.len() < n {
        while filled < q as u32 {
            acc |= (*body.next().expect("length checked above") as u64) << filled;
            filled += 8;
        }
        words.push((acc & mask) as u32);
        acc >>= q;
        filled -= q as u32;
    }
    let body = if q == LOSSLESS_BITS {
        PayloadBody::Raw(words.into_iter().map(|w| f32::from_bits(w) as f64).collect())
    } else {
        PayloadBody::Codes(words)
    };
    Ok(QuantizedPayload { gnb_id, round, q, scale, body })
}
