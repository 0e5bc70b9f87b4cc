//! Byte corpora, contiguous-window batching, the repeats task and a small
//! synthetic English-like text generator.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Zipf};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::Rng;

pub const BYTE_VOCAB: usize = 256;

/// Byte corpus split into contiguous train/valid/test ranges in file order.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub valid: Vec<u8>,
    pub test: Vec<u8>,
    pub source: Option<PathBuf>,
    /// SHA-256 of the full byte stream, hex encoded.
    pub hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], ratios: [f64; 3], source: Option<PathBuf>) -> Result<Self> {
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
        }
        let n = bytes.len();
        // Small epsilon so that e.g. 0.9 · 1000 lands on 900, not 899.
        let cut = |r: f64| ((n as f64 * r) + 1e-6).floor() as usize;
        let a = cut(ratios[0]).min(n);
        let b = (a + cut(ratios[1])).min(n);
        Ok(Corpus {
            train: bytes[..a].to_vec(),
            valid: bytes[a..b].to_vec(),
            test: bytes[b..].to_vec(),
            source,
            hash: content_hash(bytes),
        })
    }

    pub fn split(&self, which: Split) -> &[u8] {
        match which {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a byte file and splits it by `ratios` (train, valid, test).
pub fn load_corpus(path: impl AsRef<Path>, ratios: [f64; 3]) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "corpus file is empty"),
        ));
    }
    Corpus::from_bytes(&bytes, ratios, Some(path.to_path_buf()))
}

/// Order-0 (unigram) entropy of a byte stream in bits per byte.
pub fn byte_entropy(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// One training batch; `inputs` and `targets` are row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

/// Contiguous, non-overlapping windows of a split, visited in a shuffled
/// order that is fixed per epoch by the seed. Any step's batch can be
/// produced directly, which keeps resumed runs aligned with fresh ones.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    data: &'a [u8],
    len: usize,
    batch: usize,
    seed: u64,
    windows: usize,
    order: HashMap<u64, Vec<usize>>,
}

impl<'a> Batcher<'a> {
    pub fn new(data: &'a [u8], len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len < 2 || batch == 0 {
            return Err(Error::Usage(format!(
                "window length {len} must be >= 2 and batch {batch} positive"
            )));
        }
        // Each window needs one extra byte for its last target.
        let windows = data.len().saturating_sub(1) / len;
        if windows < batch {
            return Err(Error::Usage(format!(
                "split of {} bytes holds {windows} windows of {len}, fewer than a batch of {batch}",
                data.len()
            )));
        }
        Ok(Batcher {
            data,
            len,
            batch,
            seed,
            windows,
            order: HashMap::new(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.windows / self.batch
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        let (seed, windows) = (self.seed, self.windows);
        if self.order.len() > 4 {
            self.order.clear();
        }
        self.order.entry(epoch).or_insert_with(|| {
            let mut rng = Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx: Vec<usize> = (0..windows).collect();
            idx.shuffle(&mut rng);
            idx
        })
    }

    /// Window start offsets used at `step`.
    pub fn starts(&mut self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        let (epoch, pos) = (step / per, (step % per) as usize);
        let (b, len) = (self.batch, self.len);
        self.epoch_order(epoch)[pos * b..(pos + 1) * b]
            .iter()
            .map(|w| w * len)
            .collect()
    }

    pub fn batch(&mut self, step: u64) -> Batch {
        let starts = self.starts(step);
        let len = self.len;
        let mut inputs = Vec::with_capacity(self.batch * len);
        let mut targets = Vec::with_capacity(self.batch * len);
        for s in starts {
            inputs.extend(self.data[s..s + len].iter().map(|&b| b as usize));
            targets.extend(self.data[s + 1..s + len + 1].iter().map(|&b| b as usize));
        }
        Batch {
            inputs,
            targets,
            batch: self.batch,
            len,
        }
    }
}

/// Role of a position in a repeats-task sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PositionClass {
    ChunkStart,
    Separator,
    ChunkEnd,
}

impl PositionClass {
    pub const ALL: [PositionClass; 3] = [
        PositionClass::ChunkStart,
        PositionClass::Separator,
        PositionClass::ChunkEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PositionClass::ChunkStart => "chunk_start",
            PositionClass::Separator => "separator",
            PositionClass::ChunkEnd => "chunk_end",
        }
    }
}

/// Sequences of three-token chunks `x # x` with `x` uniform over the
/// alphabet. Letters are `0..alphabet`, the separator is `alphabet`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RepeatsTask {
    pub alphabet: usize,
    pub length: usize,
}

impl RepeatsTask {
    pub fn new(alphabet: usize, length: usize) -> Result<Self> {
        if alphabet == 0 {
            return Err(Error::Config("repeats alphabet must be non-empty".into()));
        }
        if length == 0 || !length.is_multiple_of(3) {
            return Err(Error::Config(format!(
                "repeats length {length} must be a positive multiple of 3"
            )));
        }
        Ok(RepeatsTask { alphabet, length })
    }

    pub fn separator(&self) -> usize {
        self.alphabet
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet + 1
    }

    /// Class of every position (identical for all sequences).
    pub fn classes(&self) -> Vec<PositionClass> {
        (0..self.length).map(|p| PositionClass::ALL[p % 3]).collect()
    }
}

pub struct Repeats {
    pub sequences: Vec<Vec<usize>>,
    pub classes: Vec<PositionClass>,
}

pub fn gen_repeats(task: &RepeatsTask, n_sequences: usize, seed: u64) -> Repeats {
    let mut rng = Rng::seed_from_u64(seed);
    let sequences = (0..n_sequences)
        .map(|_| {
            let mut s = Vec::with_capacity(task.length);
            for _ in 0..task.length / 3 {
                let x = rng.random_range(0..task.alphabet);
                s.extend([x, task.separator(), x]);
            }
            s
        })
        .collect();
    Repeats {
        sequences,
        classes: task.classes(),
    }
}

const WORDS: &str = "the of and to in a is that for it as was with be by on not he i this are or his \
from at which but have an they you were her she there been one all we their has would when if so no \
will more can about out up what into them some time only its other could then than these two may first \
new like our over such after most also made many did before must through back years where much your way \
well down should because each just those people how too little state good very make world still own see \
men work long get here between both life being under never day same another know while last might us \
great old year off come since against go came right used take three small large house water light river \
stone morning evening letter garden window mountain country village question answer number family \
children mother father brother sister friend king queen city road ship island forest field animal \
horse winter summer spring autumn silver golden ancient quiet bright dark strange simple beautiful";

/// Deterministic English-like text: Zipf-distributed words from a fixed
/// list, sentence capitalisation, commas and paragraph breaks.
pub fn synth_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    let words: Vec<&str> = WORDS.split_whitespace().collect();
    let mut rng = Rng::seed_from_u64(seed);
    let zipf = Zipf::new(words.len() as f64, 1.1).expect("valid zipf parameters");
    let mut out = Vec::with_capacity(n_bytes + 64);
    let mut start = true;
    let mut in_sentence = 0;
    while out.len() < n_bytes {
        let w = words[zipf.sample(&mut rng) as usize - 1];
        if start {
            let mut c = w.chars();
            let first = c.next().expect("non-empty word").to_ascii_uppercase();
            out.push(first as u8);
            out.extend(c.as_str().bytes());
            start = false;
        } else {
            out.push(b' ');
            out.extend(w.bytes());
        }
        in_sentence += 1;
        if in_sentence > 3 && rng.random::<f64>() < 0.12 {
            out.push(if rng.random::<f64>() < 0.9 { b'.' } else { b'?' });
            in_sentence = 0;
            start = true;
            if rng.random::<f64>() < 0.15 {
                out.push(b'\n');
            } else {
                out.push(b' ');
            }
        } else if in_sentence > 2 && rng.random::<f64>() < 0.06 {
            out.push(b',');
        }
    }
    out.truncate(n_bytes);
    out
}
