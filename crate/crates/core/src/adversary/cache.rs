//! Binary cache of precomputed augmented samples.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "DADCACHE"
//! version          u16
//! teacher          32 bytes SHA-256 of the teacher checkpoint
//! discretizer      32 bytes SHA-256 of the discretizer checkpoint
//! epsilon          f64
//! steps            u32
//! step_size        f64
//! norm             u8       0 = linf, 2 = l2
//! retries          u32
//! keep_rejected    u8
//! seed             u64
//! record count     u64
//! records, sorted by sample id:
//!   sample_id      u64
//!   accepted       u8
//!   label          u16
//!   gen_seed       u64
//!   channels, height, width   u32 each
//!   pixels         f32 x (c*h*w)
//!   aug logits     u32 length + f32 values
//!   clean logits   u32 length + f32 values
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use super::{dad_generate_batch, AdversarialRecord, AttackConfig, Norm};
use crate::codec::{hex, Decoder, Encoder, Fingerprint};
use crate::data::{batch_tensor, Dataset, Image};
use crate::discretizer::Discretizer;
use crate::error::{Error, Result};
use crate::model::{predict, Model};

pub const CACHE_VERSION: u16 = 1;
const CACHE_MAGIC: &[u8; 8] = b"DADCACHE";
const MAX_PIXELS: usize = 1 << 24;
const MAX_CLASSES: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheHeader {
    pub version: u16,
    pub teacher: Fingerprint,
    pub discretizer: Fingerprint,
    pub attack: AttackConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheFile {
    pub header: CacheHeader,
    pub records: Vec<AdversarialRecord>,
}

impl CacheFile {
    pub fn accepted(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.accepted() as f64 / self.records.len() as f64
        }
    }

    /// Fails unless the cache was built from exactly these artifacts.
    pub fn check_fingerprints(&self, teacher: &Fingerprint, disc: &Fingerprint) -> Result<()> {
        if &self.header.teacher != teacher {
            return Err(Error::Format(format!(
                "cache was built for teacher {} but {} was supplied",
                hex(&self.header.teacher),
                hex(teacher)
            )));
        }
        if &self.header.discretizer != disc {
            return Err(Error::Format(format!(
                "cache was built for discretizer {} but {} was supplied",
                hex(&self.header.discretizer),
                hex(disc)
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut enc = Encoder::new(w);
        let h = &self.header;
        enc.bytes(CACHE_MAGIC)?;
        enc.u16(h.version)?;
        enc.bytes(&h.teacher)?;
        enc.bytes(&h.discretizer)?;
        enc.f64(h.attack.epsilon)?;
        enc.u32(h.attack.steps)?;
        enc.f64(h.attack.step_size)?;
        enc.u8(h.attack.norm.code())?;
        enc.u32(h.attack.retries)?;
        enc.u8(h.attack.keep_rejected as u8)?;
        enc.u64(h.seed)?;
        enc.u64(self.records.len() as u64)?;
        for r in &self.records {
            enc.u64(r.sample_id)?;
            enc.u8(r.accepted as u8)?;
            let label = u16::try_from(r.label).map_err(|_| Error::Format(format!("label {} exceeds u16", r.label)))?;
            enc.u16(label)?;
            enc.u64(r.seed)?;
            for d in r.image.shape() {
                enc.u32(d as u32)?;
            }
            for &v in &r.image.data {
                enc.f32(v)?;
            }
            enc.f32s(&r.teacher_logits_aug)?;
            enc.f32s(&r.teacher_logits_clean)?;
        }
        enc.into_inner().flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut dec = Decoder::new(r);
        if &dec.array::<8>()? != CACHE_MAGIC {
            return Err(Error::Format("not a cache file (bad magic)".into()));
        }
        let version = dec.u16()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let teacher = dec.array()?;
        let discretizer = dec.array()?;
        let attack = AttackConfig {
            epsilon: dec.f64()?,
            steps: dec.u32()?,
            step_size: dec.f64()?,
            norm: Norm::from_code(dec.u8()?)?,
            retries: dec.u32()?,
            keep_rejected: dec.u8()? != 0,
        };
        let seed = dec.u64()?;
        let count = dec.u64()?;
        let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
        for i in 0..count {
            let bad = |reason: String| Error::MalformedRecord { record: format!("cache record {i}"), reason };
            let sample_id = dec.u64()?;
            let accepted = match dec.u8()? {
                0 => false,
                1 => true,
                v => return Err(bad(format!("accepted flag {v}"))),
            };
            let label = dec.u16()? as usize;
            let gen_seed = dec.u64()?;
            let (c, h, w) = (dec.u32()? as usize, dec.u32()? as usize, dec.u32()? as usize);
            let n = c.checked_mul(h).and_then(|v| v.checked_mul(w)).filter(|&n| n <= MAX_PIXELS);
            let n = n.ok_or_else(|| bad(format!("image shape {c}x{h}x{w}")))?;
            let data = (0..n).map(|_| dec.f32()).collect::<Result<Vec<_>>>()?;
            let image = Image::new(c, h, w, data)?;
            if !image.in_unit_range() {
                return Err(bad("pixel outside [0, 1]".into()));
            }
            let aug = dec.f32s(MAX_CLASSES)?;
            let clean = dec.f32s(MAX_CLASSES)?;
            if label >= aug.len() || aug.len() != clean.len() {
                return Err(bad("label or logit lengths inconsistent".into()));
            }
            records.push(AdversarialRecord {
                sample_id,
                label,
                image,
                teacher_logits_aug: aug,
                teacher_logits_clean: clean,
                accepted,
                seed: gen_seed,
            });
        }
        if !dec.at_end()? {
            return Err(Error::Format("trailing bytes after cache records".into()));
        }
        Ok(Self { header: CacheHeader { version, teacher, discretizer, attack, seed }, records })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(Cursor::new(bytes))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

const GEN_BATCH: usize = 50;

/// Generates one record per sample (plus retries) and returns the canonical
/// cache, records sorted by sample id. `workers > 1` shards samples over
/// threads; the output does not depend on the worker count.
pub fn build_cache(
    dataset: &Dataset,
    teacher: &Model,
    disc: &Discretizer,
    cfg: &AttackConfig,
    seed: u64,
    workers: usize,
) -> Result<CacheFile> {
    cfg.validate()?;
    let teacher_fp = teacher.fingerprint()?;
    let disc_fp = disc.fingerprint()?;
    if teacher_fp == disc_fp {
        log::warn!("teacher and discretizer fingerprints collide: {}", hex(&teacher_fp));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(GEN_BATCH).collect();
    let run = |chunk: &[usize]| -> Result<Vec<AdversarialRecord>> {
        let images: Vec<&Image> = chunk.iter().map(|&i| &dataset.examples[i].image).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.examples[i].label).collect();
        let ids: Vec<u64> = chunk.iter().map(|&i| dataset.examples[i].id).collect();
        dad_generate_batch(teacher, disc, &images, &labels, &ids, cfg, seed)
    };
    let workers = workers.max(1);
    let mut records = Vec::with_capacity(dataset.len());
    if workers == 1 {
        for chunk in &chunks {
            records.extend(run(chunk)?);
        }
    } else {
        let results: Vec<Result<Vec<AdversarialRecord>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let mine: Vec<&[usize]> = chunks.iter().skip(w).step_by(workers).copied().collect();
                    let run = &run;
                    s.spawn(move || -> Result<Vec<AdversarialRecord>> {
                        let mut out = Vec::new();
                        for c in mine {
                            out.extend(run(c)?);
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("cache worker panicked")).collect()
        });
        for r in results {
            records.extend(r?);
        }
    }
    if !cfg.keep_rejected {
        records.retain(|r| r.accepted);
    }
    records.sort_by_key(|r| r.sample_id);
    let cache = CacheFile {
        header: CacheHeader { version: CACHE_VERSION, teacher: teacher_fp, discretizer: disc_fp, attack: *cfg, seed },
        records,
    };
    log::info!(
        "built cache: {} records, {} accepted ({:.1}%)",
        cache.records.len(),
        cache.accepted(),
        100.0 * cache.acceptance_rate()
    );
    Ok(cache)
}

/// Re-runs the teacher on every stored image and counts records whose
/// stored verdict disagrees.
pub fn verify_cache(cache: &CacheFile, teacher: &Model) -> Result<usize> {
    let mut mismatches = 0;
    for chunk in cache.records.chunks(64) {
        let x = batch_tensor(chunk.iter().map(|r| &r.image))?;
        let pred = predict(teacher, &x)?;
        mismatches += chunk.iter().zip(pred).filter(|(r, p)| (*p == r.label) != r.accepted).count();
    }
    Ok(mismatches)
}
