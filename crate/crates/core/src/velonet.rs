//! The velocity regression network: IMU window `[B, 6, N]` to horizontal
//! velocity `[B, 2]`.
//!
//! Stem (strided conv, batch norm, ReLU, max pool), four layers of Res2Net
//! bottlenecks, one movable attention block plus a fixed one after the last
//! layer, then global average pooling, dropout and a linear head.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cbam::Cbam;
use crate::error::{ensure, Error, Result};
use crate::nn::{global_pool, maxpool1d, BatchNorm1dLayer, Conv1dLayer, DropoutLayer, LinearLayer, Mode, Module};
use crate::nn::{PoolAxis, PoolOp};
use crate::res2net::Res2NetBlock;
use crate::tensor::{conv_len, prefixed, Parameterized, Tape, Tensor, Var};

pub const IN_CHANNELS: usize = 6;
pub const OUTPUTS: usize = 2;
pub const EXPANSION: usize = 4;

/// Where the movable attention block sits: `P1` before Layer1, `P2` to `P4`
/// after Layer1 to Layer3 respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CbamPlacement {
    P1,
    P2,
    P3,
    #[default]
    P4,
}

impl CbamPlacement {
    pub const ALL: [CbamPlacement; 4] = [CbamPlacement::P1, CbamPlacement::P2, CbamPlacement::P3, CbamPlacement::P4];

    /// Index of the layer the block precedes.
    pub fn layer_index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CbamPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.layer_index() + 1)
    }
}

impl FromStr for CbamPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "p1" => Ok(CbamPlacement::P1),
            "p2" => Ok(CbamPlacement::P2),
            "p3" => Ok(CbamPlacement::P3),
            "p4" => Ok(CbamPlacement::P4),
            other => Err(Error::contract(format!("unknown attention placement {other:?}, expected p1..p4"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VeloNetConfig {
    pub window_n: usize,
    pub in_channels: usize,
    pub layer_blocks: Vec<usize>,
    pub base_width: usize,
    pub cbam_placement: CbamPlacement,
    pub dropout_rate: f64,
    pub rng_seed: u64,
}

impl Default for VeloNetConfig {
    fn default() -> Self {
        VeloNetConfig {
            window_n: 200,
            in_channels: IN_CHANNELS,
            layer_blocks: vec![3, 4, 6, 3],
            base_width: 64,
            cbam_placement: CbamPlacement::P4,
            dropout_rate: 0.5,
            rng_seed: 0,
        }
    }
}

impl VeloNetConfig {
    /// base_width 8, one block per layer.
    pub fn tiny(window_n: usize) -> Self {
        VeloNetConfig { window_n, layer_blocks: vec![1, 1, 1, 1], base_width: 8, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels == IN_CHANNELS, "in_channels must be {IN_CHANNELS}, got {}", self.in_channels);
        ensure!(self.layer_blocks.len() == 4, "layer_blocks must list 4 layers, got {}", self.layer_blocks.len());
        ensure!(self.layer_blocks.iter().all(|&b| b > 0), "every layer needs at least one block");
        ensure!(
            self.base_width > 0 && self.base_width % crate::res2net::DEFAULT_SCALE == 0,
            "base_width must be a positive multiple of {}, got {}",
            crate::res2net::DEFAULT_SCALE,
            self.base_width
        );
        ensure!((0.0..1.0).contains(&self.dropout_rate), "dropout_rate must lie in [0, 1)");
        self.stage_lengths().map(|_| ())
    }

    pub fn layer_mid(&self, layer: usize) -> usize {
        self.base_width << layer
    }

    pub fn layer_out(&self, layer: usize) -> usize {
        EXPANSION * self.layer_mid(layer)
    }

    /// Channels entering layer `layer`.
    pub fn layer_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.base_width
        } else {
            self.layer_out(layer - 1)
        }
    }

    pub fn cbam_a_channels(&self) -> usize {
        self.layer_in(self.cbam_placement.layer_index())
    }

    pub fn final_channels(&self) -> usize {
        self.layer_out(3)
    }

    /// Sequence length after stem conv, stem pool and each layer.
    pub fn stage_lengths(&self) -> Result<Vec<(String, usize)>> {
        let fail = |stage: &str, len: usize| {
            Error::contract(format!("window_n {} too short: {stage} receives length {len}", self.window_n))
        };
        let mut out = Vec::new();
        let mut len = self.window_n;
        len = conv_len(len, 7, 2, 3, 1).filter(|&l| l > 0).ok_or_else(|| fail("stem conv", len))?;
        out.push(("stem conv".to_string(), len));
        len = conv_len(len, 3, 2, 1, 1).filter(|&l| l > 0).ok_or_else(|| fail("stem pool", len))?;
        out.push(("stem pool".to_string(), len));
        for layer in 0..4 {
            let stride = if layer == 0 { 1 } else { 2 };
            let name = format!("layer{}", layer + 1);
            len = conv_len(len, 3, stride, 1, 1).filter(|&l| l > 0).ok_or_else(|| fail(&name, len))?;
            out.push((name, len));
        }
        Ok(out)
    }

    /// `key=value` lines describing the architecture; stored in weight files.
    pub fn architecture_echo(&self) -> Vec<(String, String)> {
        let blocks: Vec<String> = self.layer_blocks.iter().map(usize::to_string).collect();
        vec![
            ("window_n".into(), self.window_n.to_string()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("layer_blocks".into(), blocks.join(",")),
            ("base_width".into(), self.base_width.to_string()),
            ("cbam_placement".into(), self.cbam_placement.to_string()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: Conv1dLayer,
    pub bn: BatchNorm1dLayer,
}

#[derive(Debug, Clone)]
pub struct VeloNet {
    pub config: VeloNetConfig,
    pub stem: Stem,
    pub layers: Vec<Vec<Res2NetBlock>>,
    pub cbam_a: Cbam,
    pub cbam_b: Cbam,
    pub dropout: DropoutLayer,
    pub head: LinearLayer,
}

impl VeloNet {
    pub fn build(config: &VeloNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let bw = config.base_width;
        let stem = Stem {
            conv: Conv1dLayer::new(config.in_channels, bw, 7, 2, 3, false, &mut rng)?,
            bn: BatchNorm1dLayer::new(bw),
        };
        let mut layers = Vec::with_capacity(4);
        for (layer, &count) in config.layer_blocks.iter().enumerate() {
            let (mid, out) = (config.layer_mid(layer), config.layer_out(layer));
            let mut blocks = Vec::with_capacity(count);
            for i in 0..count {
                let stride = if i == 0 && layer > 0 { 2 } else { 1 };
                let inc = if i == 0 { config.layer_in(layer) } else { out };
                blocks.push(Res2NetBlock::new(inc, mid, out, stride, &mut rng)?);
            }
            layers.push(blocks);
        }
        let cbam_a = Cbam::new(config.cbam_a_channels(), &mut rng)?;
        let cbam_b = Cbam::new(config.final_channels(), &mut rng)?;
        let head = LinearLayer::new(config.final_channels(), OUTPUTS, &mut rng)?;
        let dropout = DropoutLayer::new(config.dropout_rate, config.rng_seed ^ 0x5eed_d207)?;
        Ok(VeloNet { config: config.clone(), stem, layers, cbam_a, cbam_b, dropout, head })
    }

    pub fn mode(&self) -> Mode {
        self.dropout.mode
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        ensure!(
            s.len() == 3 && s[1] == self.config.in_channels && s[2] == self.config.window_n,
            "velonet: expected [B, {}, {}] input, got {s:?}",
            self.config.in_channels,
            self.config.window_n
        );
        let mut h = self.stem.conv.forward(tape, x)?;
        h = self.stem.bn.forward(tape, h)?;
        h = tape.relu(h);
        h = maxpool1d(tape, h, 3, 2, 1)?;
        let at = self.config.cbam_placement.layer_index();
        for (i, blocks) in self.layers.iter_mut().enumerate() {
            if i == at {
                h = self.cbam_a.forward(tape, h)?;
            }
            for block in blocks {
                h = block.forward(tape, h)?;
            }
        }
        h = self.cbam_b.forward(tape, h)?;
        let pooled = global_pool(tape, h, PoolOp::Avg, PoolAxis::Length)?;
        let feat = tape.reshape(pooled, &[s[0], self.config.final_channels()])?;
        let feat = self.dropout.forward(tape, feat)?;
        self.head.forward(tape, feat)
    }

    /// Eval-mode forward on plain data; returns `[B, 2]` row-major.
    pub fn predict(&mut self, input: &Tensor) -> Result<Vec<[f64; 2]>> {
        let prev = self.mode();
        self.set_mode(Mode::Eval);
        let mut tape = Tape::new();
        let x = tape.constant(input.shape(), input.data().to_vec());
        let out = x.and_then(|x| self.forward(&mut tape, x));
        self.set_mode(prev);
        let out = out?;
        Ok(tape.value(out).chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_weights(path: &Path, config: &VeloNetConfig) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        weights::encode(&self.config.architecture_echo(), &self.named_tensors())
    }

    pub fn from_bytes(bytes: &[u8], config: &VeloNetConfig) -> Result<Self> {
        let (echo, blocks) = weights::decode(bytes)?;
        let expected = config.architecture_echo();
        for (key, want) in &expected {
            match echo.iter().find(|(k, _)| k == key) {
                Some((_, got)) if got == want => {}
                Some((_, got)) => {
                    return Err(Error::ConfigMismatch(format!("{key}: file has {got}, config has {want}")))
                }
                None => return Err(Error::ConfigMismatch(format!("{key} missing from file header"))),
            }
        }
        let mut net = VeloNet::build(config)?;
        let mut tensors = net.named_tensors_mut();
        ensure_block_count(blocks.len(), tensors.len())?;
        for (name, shape, data) in blocks {
            let slot = tensors
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::CorruptFile(format!("unexpected tensor {name:?}")))?;
            if slot.1.shape() != shape.as_slice() {
                return Err(Error::CorruptFile(format!(
                    "tensor {name:?} has shape {shape:?}, network expects {:?}",
                    slot.1.shape()
                )));
            }
            slot.1.assign(&data)?;
        }
        Ok(net)
    }
}

fn ensure_block_count(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::CorruptFile(format!("file holds {found} tensors, network has {expected}")));
    }
    Ok(())
}

impl Parameterized for VeloNet {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("stem.conv", self.stem.conv.named_tensors());
        v.extend(prefixed("stem.bn", self.stem.bn.named_tensors()));
        for (l, blocks) in self.layers.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                v.extend(prefixed(&format!("layer{}.{b}", l + 1), block.named_tensors()));
            }
        }
        v.extend(prefixed("cbam_a", self.cbam_a.named_tensors()));
        v.extend(prefixed("cbam_b", self.cbam_b.named_tensors()));
        v.extend(prefixed("head", self.head.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("stem.conv", self.stem.conv.named_tensors_mut());
        v.extend(prefixed("stem.bn", self.stem.bn.named_tensors_mut()));
        for (l, blocks) in self.layers.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                v.extend(prefixed(&format!("layer{}.{b}", l + 1), block.named_tensors_mut()));
            }
        }
        v.extend(prefixed("cbam_a", self.cbam_a.named_tensors_mut()));
        v.extend(prefixed("cbam_b", self.cbam_b.named_tensors_mut()));
        v.extend(prefixed("head", self.head.named_tensors_mut()));
        v
    }
}

impl Module for VeloNet {
    fn set_mode(&mut self, mode: Mode) {
        self.stem.bn.set_mode(mode);
        self.layers.iter_mut().flatten().for_each(|b| b.set_mode(mode));
        self.dropout.set_mode(mode);
    }
}

/// Binary weight container. All integers and floats are little-endian.
///
/// ```text
/// magic "VELONETW" | u32 version
/// u32 n_entries | n × (str key, str value)
/// u32 n_tensors | n × (str name, u32 rank, rank × u64 dim, numel × f64)
/// ```
/// where `str` is a u32 byte length followed by UTF-8 bytes.
mod weights {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"VELONETW";
    pub const VERSION: u32 = 1;

    type Block = (String, Vec<usize>, Vec<f64>);

    fn put_str(out: &mut Vec<u8>, s: &str) {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }

    pub fn encode(echo: &[(String, String)], tensors: &[(String, &Tensor)]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        for (k, v) in echo {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::CorruptFile(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }

        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }

        fn str(&mut self) -> Result<String> {
            let n = self.u32()? as usize;
            let raw = self.take(n)?;
            String::from_utf8(raw.to_vec()).map_err(|_| Error::CorruptFile("invalid UTF-8 string".into()))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<(Vec<(String, String)>, Vec<Block>)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::CorruptFile("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptFile(format!("unsupported version {version}")));
        }
        let n_echo = r.u32()? as usize;
        let mut echo = Vec::new();
        for _ in 0..n_echo {
            echo.push((r.str()?, r.str()?));
        }
        let n_tensors = r.u32()? as usize;
        let mut blocks = Vec::new();
        for _ in 0..n_tensors {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::CorruptFile(format!("tensor {name:?} claims rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or_else(|| Error::CorruptFile(format!("tensor {name:?} has implausible shape {shape:?}")))?;
            let raw = r.take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            blocks.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptFile(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok((echo, blocks))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_round_trips_through_text() {
        for p in CbamPlacement::ALL {
            assert_eq!(p.to_string().parse::<CbamPlacement>().unwrap(), p);
        }
        assert!("p5".parse::<CbamPlacement>().is_err());
    }

    #[test]
    fn default_stride_plan() {
        let lens: Vec<usize> = VeloNetConfig::default().stage_lengths().unwrap().into_iter().map(|(_, l)| l).collect();
        assert_eq!(lens, vec![100, 50, 50, 25, 13, 7]);
    }

    #[test]
    fn default_layout_matches_block_counts() {
        let net = VeloNet::build(&VeloNetConfig::default()).unwrap();
        let counts: Vec<usize> = net.layers.iter().map(Vec::len).collect();
        assert_eq!(counts, vec![3, 4, 6, 3]);
        assert_eq!(net.cbam_a.channels(), 1024);
        assert_eq!(net.cbam_b.channels(), 2048);
        assert_eq!(net.head.in_features, 2048);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = |f: fn(&mut VeloNetConfig)| {
            let mut c = VeloNetConfig::tiny(64);
            f(&mut c);
            VeloNet::build(&c).is_err()
        };
        assert!(bad(|c| c.in_channels = 3));
        assert!(bad(|c| c.layer_blocks = vec![1, 1, 1]));
        assert!(bad(|c| c.window_n = 0));
        assert!(bad(|c| c.dropout_rate = 1.0));
        assert!(bad(|c| c.base_width = 6));
    }

    #[test]
    fn short_window_error_names_stage() {
        let mut c = VeloNetConfig::tiny(64);
        c.window_n = 0;
        let err = VeloNet::build(&c).unwrap_err().to_string();
        assert!(err.contains("stem conv"), "{err}");
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let net = VeloNet::build(&VeloNetConfig::tiny(32)).unwrap();
        let bytes = net.to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(VeloNet::from_bytes(cut, &net.config), Err(Error::CorruptFile(_))));
        assert!(matches!(VeloNet::from_bytes(b"nonsense", &net.config), Err(Error::CorruptFile(_))));
    }
}
