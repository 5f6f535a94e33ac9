//! Versioned binary checkpoints.
//!
//! Layout, all integers `u32` little-endian and strings length-prefixed
//! UTF-8: magic `PMAD`, format version, configuration echo, domain labels
//! as (dataset, subdomain) pairs, then named tensors as
//! `(name, rows, cols, rows·cols f32 LE values in row-major order)`.

use std::fs;
use std::path::Path;

use pmad_core::data::{DomainIndex, DomainLabel};
use pmad_core::memory::{MemoryBank, MemoryConfig};
use pmad_core::model::Model;
use pmad_core::network::Network;
use pmad_core::numerics::Matrix;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PMAD";
pub const VERSION: u32 = 1;

/// A trained network with the configuration and domains it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub domains: DomainIndex,
    pub network: Network<f32>,
}

fn item_name(i: usize) -> String {
    format!("memory.item{i}")
}

impl Checkpoint {
    /// Named tensors in file order: trainable tensors, then memory items.
    pub fn tensors(&self) -> Vec<(String, &Matrix<f32>)> {
        let mut t = self.network.tensors();
        if let Some(b) = &self.network.bank {
            t.extend(b.items.iter().enumerate().map(|(i, m)| (item_name(i), m)));
        }
        t
    }

    fn echo(&self) -> String {
        let mut text = self.config.train_text();
        if let Some(b) = &self.network.bank {
            let init: Vec<String> = b.init_domain.iter().map(|d| d.map_or_else(|| "-".to_string(), |d| d.to_string())).collect();
            text.push_str(&format!("bank.k = {}\nbank.items = {}\nbank.init_domain = {}\n", b.cfg.k, b.len(), init.join(",")));
        }
        text
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.echo());
        put_u32(&mut out, self.domains.len() as u32);
        for l in self.domains.labels() {
            put_str(&mut out, &l.dataset);
            put_str(&mut out, &l.subdomain);
        }
        let tensors = self.tensors();
        put_u32(&mut out, tensors.len() as u32);
        for (name, m) in tensors {
            put_str(&mut out, &name);
            put_u32(&mut out, m.rows() as u32);
            put_u32(&mut out, m.cols() as u32);
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |m: String| Error::format(origin, m);
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(&fail)?;
        if magic != MAGIC {
            return Err(fail("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32().map_err(&fail)?;
        if version != VERSION {
            return Err(fail(format!("checkpoint format version {version}, expected {VERSION}")));
        }
        let echo = r.string().map_err(&fail)?;
        let mut config = RunConfig::default();
        let mut bank_k = None;
        let mut bank_items = 0usize;
        let mut init_domain = Vec::new();
        for line in echo.lines() {
            let (k, v) = line.split_once(" = ").ok_or_else(|| fail(format!("malformed echo line `{line}`")))?;
            match k {
                "bank.k" => bank_k = Some(v.parse().map_err(|_| fail("bad bank.k".into()))?),
                "bank.items" => bank_items = v.parse().map_err(|_| fail("bad bank.items".into()))?,
                "bank.init_domain" => {
                    init_domain = v
                        .split(',')
                        .map(|d| if d == "-" { Ok(None) } else { d.parse().map(Some) })
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| fail("bad bank.init_domain".into()))?
                }
                _ => config.set(k, v)?,
            }
        }
        let n_domains = r.u32().map_err(&fail)? as usize;
        let mut labels = Vec::with_capacity(n_domains);
        for _ in 0..n_domains {
            let dataset = r.string().map_err(&fail)?;
            let subdomain = r.string().map_err(&fail)?;
            labels.push(DomainLabel::new(dataset, subdomain));
        }
        let domains = DomainIndex::from_labels(labels)?;

        let n_tensors = r.u32().map_err(&fail)? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.string().map_err(&fail)?;
            let rows = r.u32().map_err(&fail)? as usize;
            let cols = r.u32().map_err(&fail)? as usize;
            let raw = r.take(rows * cols * 4).map_err(&fail)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Matrix::new(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let cfg = &config.train;
        let model = Model::<f32>::template(cfg.model)?;
        let bank = if cfg.memory_strategy.uses_memory() {
            let k = bank_k.ok_or_else(|| fail("memory strategy without bank.k".into()))?;
            let d = cfg.model.d_model;
            let items = vec![Matrix::zeros(cfg.model.max_patches, d); bank_items];
            let mem = MemoryConfig { k, tau_select: cfg.tau_select, tau_attn: cfg.tau_attn, renormalize_topk: cfg.renormalize_topk };
            Some(MemoryBank::new(items, Matrix::zeros(d, d), Matrix::zeros(d, d), mem, init_domain)?)
        } else {
            None
        };
        let mut network = Network::new(model, bank, cfg.memory_strategy)?;
        let mut ck_template = Checkpoint { config: config.clone(), domains: domains.clone(), network: network.clone() };
        let expected: Vec<(String, (usize, usize))> = ck_template.tensors().iter().map(|(n, m)| (n.clone(), m.shape())).collect();
        if expected.len() != tensors.len() {
            return Err(fail(format!("{} tensors stored, configuration implies {}", tensors.len(), expected.len())));
        }
        for ((en, es), (n, m)) in expected.iter().zip(&tensors) {
            if en != n || *es != m.shape() {
                return Err(fail(format!("tensor `{n}` {:?} does not match expected `{en}` {:?}", m.shape(), es)));
            }
        }
        let trainable = network.tensors().len();
        let flat: Vec<f32> = tensors[..trainable].iter().flat_map(|(_, m)| m.data().iter().copied()).collect();
        network.load_flat(&flat)?;
        if let Some(b) = &mut network.bank {
            for (slot, (_, m)) in b.items.iter_mut().zip(&tensors[trainable..]) {
                *slot = m.clone();
            }
        }
        ck_template.network = network;
        Ok(ck_template)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<u64> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = ck.encode();
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} (needed {n} more)", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| "string is not valid UTF-8".to_string())
    }
}
