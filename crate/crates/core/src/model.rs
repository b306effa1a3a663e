//! Two-layer score network `f^i(x) = V_iᵀ σ(W x)` without biases.
//!
//! # Weight file
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! b"CERTNET1"            8 bytes magic
//! m, d, k                u64 each
//! activation             u64 (0 = relu, 1 = sigmoid)
//! W                      m·d f64, row-major
//! V                      k·m f64, row-major
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub const NET_MAGIC: &[u8; 8] = b"CERTNET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// `σ'(z)`, with `σ'(0) = 0` for relu.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = self.apply(z);
                s * (1.0 - s)
            }
        }
    }

    /// Upper bound β on `σ'` over the real line.
    pub fn derivative_bound(self) -> f64 {
        match self {
            Activation::Relu => 1.0,
            Activation::Sigmoid => 0.25,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
        }
    }

    fn from_tag(tag: u64) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => invalid(format!("unknown activation '{other}'")),
        }
    }
}

/// First layer `W` (m×d), second layer `V` (k×m).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub activation: Activation,
}

/// An ordered class pair with its second-layer difference `v = V_i − V_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginPair {
    pub i: usize,
    pub j: usize,
    pub v: DVector<f64>,
}

impl MarginPair {
    pub fn new(net: &Network, i: usize, j: usize) -> Result<Self> {
        let k = net.num_classes();
        if i == j {
            return invalid(format!(
                "margin pair needs distinct classes, got ({i}, {i})"
            ));
        }
        if i >= k || j >= k {
            return invalid(format!("class pair ({i}, {j}) out of range for k = {k}"));
        }
        let v = (net.v.row(i) - net.v.row(j)).transpose();
        Ok(Self { i, j, v })
    }

    pub fn swapped(&self) -> Self {
        Self {
            i: self.j,
            j: self.i,
            v: -&self.v,
        }
    }
}

impl Network {
    pub fn new(w: DMatrix<f64>, v: DMatrix<f64>, activation: Activation) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 || v.nrows() == 0 {
            return invalid("network dimensions must be positive");
        }
        if v.ncols() != w.nrows() {
            return invalid(format!(
                "V has {} columns but W has {} rows",
                v.ncols(),
                w.nrows()
            ));
        }
        if !w.iter().chain(v.iter()).all(|x| x.is_finite()) {
            return invalid("network weights must be finite");
        }
        Ok(Self { w, v, activation })
    }

    pub fn zeros(m: usize, d: usize, k: usize, activation: Activation) -> Self {
        Self {
            w: DMatrix::zeros(m, d),
            v: DMatrix::zeros(k, m),
            activation,
        }
    }

    /// Uniform initialisation in `±1/√fan_in` for each layer.
    pub fn init_uniform<R: Rng + ?Sized>(
        m: usize,
        d: usize,
        k: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bw = 1.0 / (d as f64).sqrt();
        let bv = 1.0 / (m as f64).sqrt();
        let w = DMatrix::from_fn(m, d, |_, _| rng.random_range(-bw..bw));
        let v = DMatrix::from_fn(k, m, |_, _| rng.random_range(-bv..bv));
        Self { w, v, activation }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.v.nrows()
    }

    /// Size `d + m + 1` of the certificate matrices.
    pub fn cert_dim(&self) -> usize {
        self.input_dim() + self.hidden_dim() + 1
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return invalid(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            ));
        }
        Ok(())
    }

    /// Pre-activations `W x`.
    pub fn preactivations(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(&self.w * DVectorView::from_slice(x, x.len()))
    }

    pub fn hidden(&self, x: &[f64]) -> Result<DVector<f64>> {
        let act = self.activation;
        Ok(self.preactivations(x)?.map(|z| act.apply(z)))
    }

    /// Class scores `V σ(W x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.hidden(x)?;
        Ok((&self.v * h).iter().copied().collect())
    }

    /// Highest-scoring class; ties go to the lower index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn pair(&self, i: usize, j: usize) -> Result<MarginPair> {
        MarginPair::new(self, i, j)
    }

    /// Pairwise margin `f^{ij}(x) = f^i(x) − f^j(x)`.
    pub fn margin(&self, pair: &MarginPair, x: &[f64]) -> Result<f64> {
        self.check_pair(pair)?;
        Ok(pair.v.dot(&self.hidden(x)?))
    }

    /// `∇_x f^{ij}(x) = Wᵀ diag(v) σ'(W x)`.
    pub fn margin_input_grad(&self, pair: &MarginPair, x: &[f64]) -> Result<Vec<f64>> {
        self.check_pair(pair)?;
        let act = self.activation;
        let z = self.preactivations(x)?;
        let gate = DVector::from_fn(z.len(), |a, _| pair.v[a] * act.derivative(z[a]));
        Ok(self.w.tr_mul(&gate).iter().copied().collect())
    }

    /// `∇_x` of `Σ_i g_i f^i(x)` for an arbitrary score cotangent `g`.
    pub fn scores_input_grad(&self, x: &[f64], score_grad: &[f64]) -> Result<Vec<f64>> {
        if score_grad.len() != self.num_classes() {
            return invalid("score gradient has wrong length");
        }
        let act = self.activation;
        let z = self.preactivations(x)?;
        let back = self.v.tr_mul(&DVector::from_column_slice(score_grad));
        let gate = DVector::from_fn(z.len(), |a, _| back[a] * act.derivative(z[a]));
        Ok(self.w.tr_mul(&gate).iter().copied().collect())
    }

    fn check_pair(&self, pair: &MarginPair) -> Result<()> {
        if pair.v.len() != self.hidden_dim() {
            return invalid("margin pair was built for a different network");
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, d, k) = (self.hidden_dim(), self.input_dim(), self.num_classes());
        let mut out = Vec::with_capacity(8 + 32 + 8 * (m * d + k * m));
        out.extend_from_slice(NET_MAGIC);
        for x in [m as u64, d as u64, k as u64, self.activation.tag()] {
            out.write_u64::<LittleEndian>(x).unwrap();
        }
        for r in 0..m {
            for c in 0..d {
                out.write_f64::<LittleEndian>(self.w[(r, c)]).unwrap();
            }
        }
        for r in 0..k {
            for c in 0..m {
                out.write_f64::<LittleEndian>(self.v[(r, c)]).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (net, used) = Self::read_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Parse {
                offset: used,
                message: format!("{} trailing bytes after network", bytes.len() - used),
            });
        }
        Ok(net)
    }

    /// Parses a network at the start of `bytes`, returning it with the number
    /// of bytes consumed.
    pub fn read_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = Cursor::new(bytes);
        let perr = |cur: &Cursor<&[u8]>, msg: &str| Error::Parse {
            offset: cur.position() as usize,
            message: msg.to_string(),
        };
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| perr(&cur, "truncated magic"))?;
        if &magic != NET_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad magic, expected CERTNET1".into(),
            });
        }
        let mut header = [0u64; 4];
        for h in header.iter_mut() {
            *h = cur
                .read_u64::<LittleEndian>()
                .map_err(|_| perr(&cur, "truncated header"))?;
        }
        let [m, d, k, tag] = header.map(|x| x as usize);
        let activation =
            Activation::from_tag(tag as u64).ok_or_else(|| perr(&cur, "unknown activation tag"))?;
        let need = 8 * (m.saturating_mul(d) + k.saturating_mul(m));
        if bytes.len() - (cur.position() as usize) < need {
            return Err(perr(&cur, "truncated weights"));
        }
        let mut read = |rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let mut mat = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    mat[(r, c)] = cur
                        .read_f64::<LittleEndian>()
                        .map_err(|_| perr(&cur, "truncated weights"))?;
                }
            }
            Ok(mat)
        };
        let w = read(m, d)?;
        let v = read(k, m)?;
        let used = cur.position() as usize;
        Ok((Network::new(w, v, activation)?, used))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialised weights, hex encoded. Certificates are bound
    /// to this value.
    pub fn weight_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (idx, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = idx;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn tiny() -> Network {
        Network::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            Activation::Relu,
        )
        .unwrap()
    }

    #[test]
    fn hand_forward() {
        assert_eq!(tiny().forward(&[2.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(tiny().predict(&[2.0]).unwrap(), 0);
        assert_eq!(tiny().predict(&[-2.0]).unwrap(), 0); // tie → lower index
    }

    #[test]
    fn zero_weights() {
        let net = Network::zeros(3, 4, 5, Activation::Sigmoid);
        let x = [0.3, 0.1, 0.9, 0.0];
        assert!(net.forward(&x).unwrap().iter().all(|&s| s == 0.0));
        let pair = net.pair(1, 3).unwrap();
        assert_eq!(net.margin(&pair, &x).unwrap(), 0.0);
        assert!(net
            .margin_input_grad(&pair, &x)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn duplicate_evaluation() {
        let mut rng = stream(11, Stream::Init);
        let net = Network::init_uniform(2, 2, 2, Activation::Relu, &mut rng);
        let x = [0.4, -0.7];
        let mut expect = [0.0; 2];
        for (i, e) in expect.iter_mut().enumerate() {
            for a in 0..2 {
                let z = net.w[(a, 0)] * x[0] + net.w[(a, 1)] * x[1];
                *e += net.v[(i, a)] * z.max(0.0);
            }
        }
        let got = net.forward(&x).unwrap();
        for i in 0..2 {
            assert!((got[i] - expect[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn margin_matches_scores() {
        let mut rng = stream(3, Stream::Init);
        let net = Network::init_uniform(5, 3, 4, Activation::Sigmoid, &mut rng);
        let x = [0.2, 0.5, 0.9];
        let s = net.forward(&x).unwrap();
        let p = net.pair(2, 0).unwrap();
        let mg = net.margin(&p, &x).unwrap();
        assert!((mg - (s[2] - s[0])).abs() < 1e-12);
        assert!((mg + net.margin(&p.swapped(), &x).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn hand_gradient() {
        let net = Network::new(
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DMatrix::from_row_slice(2, 1, &[3.0, 0.0]),
            Activation::Relu,
        )
        .unwrap();
        let pair = net.pair(0, 1).unwrap();
        assert_eq!(net.margin_input_grad(&pair, &[1.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn bad_inputs() {
        let net = tiny();
        assert!(net.forward(&[1.0, 2.0]).is_err());
        assert!(net.pair(0, 0).is_err());
        assert!(net.pair(0, 2).is_err());
        assert!(
            Network::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 3), Activation::Relu).is_err()
        );
    }

    #[test]
    fn bytes_round_trip() {
        let mut rng = stream(5, Stream::Init);
        let net = Network::init_uniform(4, 3, 2, Activation::Sigmoid, &mut rng);
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..8], NET_MAGIC);
        assert_eq!(Network::from_bytes(&bytes).unwrap(), net);
        assert!(Network::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Network::from_bytes(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert_eq!(net.weight_hash().len(), 64);
    }
}
