//! Binary shard file format.
//!
//! Layout (all integers little-endian, all reals little-endian f64):
//!
//! ```text
//! magic "FIDX" | u32 version = 1 | u32 n_clients
//! per client:
//!   u32 client_id | u32 domain_id | u32 n_samples | u32 d_emb | u32 n_classes
//!   per sample: u32 label | d_emb f64 (image embedding)
//!   class table: n_classes x d_emb f64 (label embeddings, one row per class)
//! ```
//!
//! The label embedding of each sample is not stored per sample; it is the
//! class-table row of its label, so round trips are bitwise lossless.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::smallnet::Matrix;

use super::{ClientShard, EmbeddingPair};

const MAGIC: &[u8; 4] = b"FIDX";
const VERSION: u32 = 1;

pub fn save_shards(shards: &[ClientShard], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(shards.len() as u32).to_le_bytes());
    for shard in shards {
        buf.extend_from_slice(&shard.client_id.to_le_bytes());
        buf.extend_from_slice(&shard.domain_id.to_le_bytes());
        buf.extend_from_slice(&(shard.pairs.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(shard.d_emb() as u32).to_le_bytes());
        buf.extend_from_slice(&(shard.n_classes() as u32).to_le_bytes());
        for pair in &shard.pairs {
            buf.extend_from_slice(&pair.label.to_le_bytes());
            for &v in &pair.image_emb {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &v in shard.class_embeddings.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos,
                field,
                detail: format!(
                    "needs {n} bytes but only {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64_vec(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let offset = self.pos;
        let b = self.take(8 * n, field)?;
        let out: Vec<f64> = b
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(idx) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: offset + 8 * idx,
                field,
                detail: "non-finite value".into(),
            });
        }
        Ok(out)
    }
}

pub fn load_shards(path: &Path) -> Result<Vec<ClientShard>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            field: "magic",
            detail: format!("expected FIDX, got {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let n_clients = r.u32("n_clients")?;

    let mut shards = Vec::with_capacity(n_clients as usize);
    for _ in 0..n_clients {
        let client_id = r.u32("client_id")?;
        let domain_id = r.u32("domain_id")?;
        let n_samples = r.u32("n_samples")?;
        let d_emb = r.u32("d_emb")? as usize;
        let n_classes = r.u32("n_classes")? as usize;

        let mut raw_samples = Vec::with_capacity(n_samples as usize);
        for _ in 0..n_samples {
            let label_offset = r.pos;
            let label = r.u32("label")?;
            if label as usize >= n_classes {
                return Err(Error::Format {
                    offset: label_offset,
                    field: "label",
                    detail: format!("label {label} out of range for {n_classes} classes"),
                });
            }
            let image_emb = r.f64_vec(d_emb, "image_emb")?;
            raw_samples.push((label, image_emb));
        }
        let table = r.f64_vec(n_classes * d_emb, "class_table")?;
        let class_embeddings = Matrix::from_vec(n_classes, d_emb, table)?;

        let pairs = raw_samples
            .into_iter()
            .map(|(label, image_emb)| EmbeddingPair {
                image_emb,
                label_emb: class_embeddings.row(label as usize).to_vec(),
                label,
            })
            .collect();

        shards.push(ClientShard {
            client_id,
            domain_id,
            class_embeddings,
            pairs,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos,
            field: "eof",
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{synth_client_shards, SynthesisSpec};
    use proptest::prelude::*;

    fn sample_shards() -> Vec<ClientShard> {
        synth_client_shards(&SynthesisSpec {
            n_classes: 3,
            n_domains: 2,
            clients_per_domain: 2,
            samples_per_client: [4, 9],
            d_emb: 8,
            label_align: 0.9,
            domain_strength: 0.3,
            noise_sigma: 0.2,
            dirichlet_alpha: Some(0.5),
            seed: Some(17),
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_structurally_equal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shards.fidx");
        let shards = sample_shards();
        save_shards(&shards, &path).unwrap();
        let loaded = load_shards(&path).unwrap();
        assert_eq!(loaded, shards);
    }

    #[test]
    fn empty_list_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.fidx");
        save_shards(&[], &path).unwrap();
        assert_eq!(load_shards(&path).unwrap(), Vec::new());
    }

    #[test]
    fn truncated_file_reports_offset_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.fidx");
        save_shards(&sample_shards(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 13);
        fs::write(&path, &bytes).unwrap();
        let err = load_shards(&path).unwrap_err();
        match err {
            Error::Format { offset, field, .. } => {
                assert!(offset > 0);
                assert!(!field.is_empty());
            }
            other => panic!("expected Format error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fidx");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            load_shards(&path),
            Err(Error::Format { field: "magic", .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn roundtrip_is_bitwise(seed in 0u64..1000) {
            let shards = synth_client_shards(&SynthesisSpec {
                n_classes: 2,
                n_domains: 1,
                clients_per_domain: 2,
                samples_per_client: [1, 5],
                d_emb: 4,
                label_align: 0.8,
                domain_strength: 0.1,
                noise_sigma: 0.3,
                dirichlet_alpha: None,
                seed: Some(seed),
            }).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("prop.fidx");
            save_shards(&shards, &path).unwrap();
            let loaded = load_shards(&path).unwrap();
            for (a, b) in shards.iter().zip(&loaded) {
                for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
                    for (x, y) in pa.image_emb.iter().zip(&pb.image_emb) {
                        prop_assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
            }
        }
    }
}
