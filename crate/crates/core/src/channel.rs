//! Rayleigh channel draws and Gaussian estimation-error injection.
//!
//! All randomness flows from a [`Seed`] split into independent ChaCha streams,
//! so a dataset is a function of `(seed, stream, index)` and not of the order
//! in which it is generated.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{CMatrix, ChannelMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Seed(pub u64);

/// Disjoint random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Channels,
    Errors,
    TrainChannels,
    TrainErrors,
    TestChannels,
    TestErrors,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Channels => 1,
            Stream::Errors => 2,
            Stream::TrainChannels => 3,
            Stream::TrainErrors => 4,
            Stream::TestChannels => 5,
            Stream::TestErrors => 6,
        }
    }
}

impl Seed {
    /// Generator for sub-stream `index` of `stream`. Indices must stay below 2^48.
    pub fn rng(self, stream: Stream, index: u64) -> ChaCha8Rng {
        debug_assert!(index < 1 << 48);
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream((stream.tag() << 48) | index);
        rng
    }
}

/// One draw from `CN(0, variance)`: real and imaginary parts are independent
/// `N(0, variance / 2)`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let scale = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * scale, im * scale)
}

/// An `L x K` matrix of i.i.d. `CN(0, 1)` entries.
pub fn draw_channel<R: Rng + ?Sized>(rng: &mut R, antennas: usize, users: usize) -> ChannelMatrix {
    // from_fn fills column-major, which fixes the draw order.
    let m = CMatrix::from_fn(antennas, users, |_, _| complex_normal(rng, 1.0));
    ChannelMatrix::new(m).expect("gaussian draws are finite")
}

pub fn sample_channels(seed: Seed, antennas: usize, users: usize, count: usize) -> Vec<ChannelMatrix> {
    let mut rng = seed.rng(Stream::Channels, 0);
    (0..count).map(|_| draw_channel(&mut rng, antennas, users)).collect()
}

/// A nominal channel together with `B` perturbed copies `H + E_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBatch {
    pub nominal: ChannelMatrix,
    pub samples: Vec<ChannelMatrix>,
    pub sigma_h2: f64,
}

impl UncertaintyBatch {
    pub fn draw<R: Rng + ?Sized>(h: &ChannelMatrix, sigma_h2: f64, count: usize, rng: &mut R) -> Result<Self> {
        if !(sigma_h2 >= 0.0) || !sigma_h2.is_finite() {
            return Err(Error::Config(format!("sigma_h2 must be >= 0, got {sigma_h2}")));
        }
        if count == 0 {
            return Err(Error::Config("need at least one uncertainty sample".into()));
        }
        let nominal = h.matrix();
        let samples = (0..count)
            .map(|_| {
                let m = if sigma_h2 == 0.0 {
                    nominal.clone()
                } else {
                    CMatrix::from_fn(nominal.nrows(), nominal.ncols(), |r, c| {
                        nominal[(r, c)] + complex_normal(rng, sigma_h2)
                    })
                };
                ChannelMatrix::new(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UncertaintyBatch { nominal: h.clone(), samples, sigma_h2 })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn inject_uncertainty(h: &ChannelMatrix, sigma_h2: f64, count: usize, seed: Seed) -> Result<UncertaintyBatch> {
    UncertaintyBatch::draw(h, sigma_h2, count, &mut seed.rng(Stream::Errors, 0))
}

const MAGIC: &[u8; 4] = b"RBCH";
const VERSION: u32 = 1;

/// Writes channels in the `RBCH` little-endian dump format.
pub fn write_channels<W: Write>(mut out: W, channels: &[ChannelMatrix]) -> Result<()> {
    let (l, k) = match channels.first() {
        Some(h) => (h.antennas(), h.users()),
        None => (0, 0),
    };
    if channels.iter().any(|h| h.antennas() != l || h.users() != k) {
        return Err(Error::Format("all channels in a dump must share dimensions".into()));
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(l as u32).to_le_bytes())?;
    out.write_all(&(k as u32).to_le_bytes())?;
    out.write_all(&(channels.len() as u64).to_le_bytes())?;
    for h in channels {
        // nalgebra storage is column-major: antenna index fastest, then user.
        for z in h.matrix().iter() {
            out.write_all(&z.re.to_le_bytes())?;
            out.write_all(&z.im.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_channels<R: Read>(mut input: R) -> Result<Vec<ChannelMatrix>> {
    let mut header = [0u8; 24];
    input.read_exact(&mut header).map_err(|_| Error::Format("truncated header".into()))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (l, k) = (u32_at(8) as usize, u32_at(12) as usize);
    let count = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    let mut buf = [0u8; 16];
    let mut channels = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut entries = Vec::with_capacity(l * k);
        for _ in 0..l * k {
            input.read_exact(&mut buf).map_err(|_| Error::Format("truncated payload".into()))?;
            let re = f64::from_le_bytes(buf[0..8].try_into().unwrap());
            let im = f64::from_le_bytes(buf[8..16].try_into().unwrap());
            entries.push(Complex64::new(re, im));
        }
        channels.push(ChannelMatrix::new(CMatrix::from_vec(l, k, entries))?);
    }
    Ok(channels)
}

pub fn save_channels(path: &Path, channels: &[ChannelMatrix]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_channels(std::io::BufWriter::new(file), channels)
}

pub fn load_channels(path: &Path) -> Result<Vec<ChannelMatrix>> {
    let file = std::fs::File::open(path)?;
    read_channels(std::io::BufReader::new(file))
}
