//! On-disk bundle cache: `<root>/<image_id>/manifest.json`, raw `f32le`
//! tensors and a PNG reference. Writers hold a per-id exclusive lock and
//! publish through a rename; readers hold the shared lock.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::{sha256_hex, DiffusionMeta, PriorBundle, PriorTexts, TextEmbedding};
use crate::error::{Error, Result};
use crate::image::TensorImage;

pub const MANIFEST_FILE: &str = "manifest.json";
const REFERENCE_FILE: &str = "reference.png";
const LOCK_DIR: &str = ".locks";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEntry {
    pub file: String,
    pub format: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub image_id: String,
    pub degradation_text: String,
    pub content_text: String,
    pub provider_id: String,
    pub prompt_template_id: String,
    pub diffusion_meta: DiffusionMeta,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub reference: ReferenceEntry,
    pub created_at: String,
}

/// The `provider_id` stored with a bundle joins the MLLM, text encoder and
/// diffusion ids with `;`. The encoder id is recovered from it on load.
pub(crate) fn encoder_id_of(provider_id: &str) -> String {
    let parts: Vec<&str> = provider_id.split(';').collect();
    match parts.as_slice() {
        [_, encoder, _] => encoder.to_string(),
        _ => provider_id.to_string(),
    }
}

fn check_id(image_id: &str) -> Result<()> {
    let ok = !image_id.is_empty()
        && image_id.len() <= 128
        && image_id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("image id {image_id:?} is not lowercase hex")))
    }
}

pub fn bundle_dir(root: &Path, image_id: &str) -> PathBuf {
    root.join(image_id)
}

#[derive(Clone, Debug)]
pub struct BundleStore {
    root: PathBuf,
}

impl BundleStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn contains(&self, image_id: &str) -> bool {
        check_id(image_id).is_ok() && bundle_dir(&self.root, image_id).join(MANIFEST_FILE).is_file()
    }

    /// Opens the per-id lock file; the caller chooses the lock mode.
    pub(crate) fn lock_file(&self, image_id: &str) -> Result<File> {
        check_id(image_id)?;
        let dir = self.root.join(LOCK_DIR);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        let path = dir.join(format!("{image_id}.lock"));
        File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .read(true)
            .open(&path)
            .map_err(Error::io(path))
    }

    pub fn save(&self, bundle: &PriorBundle) -> Result<PathBuf> {
        let lock = self.lock_file(&bundle.image_id)?;
        lock.lock().map_err(Error::io(self.root.join(LOCK_DIR)))?;
        self.save_locked(bundle)
    }

    /// Writes the bundle; the caller holds the exclusive lock for its id.
    pub(crate) fn save_locked(&self, bundle: &PriorBundle) -> Result<PathBuf> {
        check_id(&bundle.image_id)?;
        bundle.verify()?;
        for (name, emb) in [("e_d", &bundle.e_d), ("e_c", &bundle.e_c)] {
            if emb.encoder_id != encoder_id_of(&bundle.texts.provider_id) {
                return Err(Error::InvalidArgument(format!(
                    "{name} encoder id {} is not recorded in provider id {}",
                    emb.encoder_id, bundle.texts.provider_id
                )));
            }
        }
        let final_dir = bundle_dir(&self.root, &bundle.image_id);
        let nonce = Utc::now().timestamp_nanos_opt().unwrap_or_default();
        let tmp = self.root.join(format!(".tmp-{}-{}-{nonce}", bundle.image_id, std::process::id()));
        fs::create_dir_all(&tmp).map_err(Error::io(&tmp))?;

        let write = |name: &str, bytes: &[u8]| -> Result<String> {
            let path = tmp.join(name);
            fs::write(&path, bytes).map_err(Error::io(path))?;
            Ok(sha256_hex(bytes))
        };
        let mut tensors = BTreeMap::new();
        for (name, emb) in [("e_d", &bundle.e_d), ("e_c", &bundle.e_c)] {
            let file = format!("{name}.f32");
            let sha256 = write(&file, &emb.to_le_bytes())?;
            let (n, c) = emb.shape();
            tensors.insert(
                name.to_string(),
                TensorEntry { file, dtype: "f32le".into(), shape: vec![n, c], sha256 },
            );
        }
        let png = bundle.reference.to_png_bytes()?;
        let reference = ReferenceEntry {
            file: REFERENCE_FILE.into(),
            format: "png".into(),
            sha256: write(REFERENCE_FILE, &png)?,
        };
        let manifest = Manifest {
            image_id: bundle.image_id.clone(),
            degradation_text: bundle.texts.degradation_text.clone(),
            content_text: bundle.texts.content_text.clone(),
            provider_id: bundle.texts.provider_id.clone(),
            prompt_template_id: bundle.texts.prompt_template_id.clone(),
            diffusion_meta: bundle.diffusion_meta.clone(),
            tensors,
            reference,
            created_at: bundle.created_at.to_rfc3339_opts(SecondsFormat::AutoSi, true),
        };
        write(MANIFEST_FILE, &serde_json::to_vec_pretty(&manifest)?)?;

        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(Error::io(&final_dir))?;
        }
        fs::rename(&tmp, &final_dir).map_err(Error::io(&final_dir))?;
        Ok(final_dir)
    }

    pub fn load(&self, image_id: &str) -> Result<PriorBundle> {
        check_id(image_id)?;
        if !self.contains(image_id) {
            return Err(Error::NotFound(format!("prior bundle {image_id}")));
        }
        let lock = self.lock_file(image_id)?;
        lock.lock_shared().map_err(Error::io(self.root.join(LOCK_DIR)))?;
        self.load_locked(image_id)
    }

    pub(crate) fn load_locked(&self, image_id: &str) -> Result<PriorBundle> {
        let dir = bundle_dir(&self.root, image_id);
        let manifest_path = dir.join(MANIFEST_FILE);
        let bytes = match fs::read(&manifest_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("prior bundle {image_id}")))
            }
            Err(e) => return Err(Error::io(manifest_path)(e)),
        };
        let corrupt = |reason: String| Error::CacheCorrupt { image_id: image_id.to_string(), reason };
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("manifest: {e}")))?;
        if manifest.image_id != image_id {
            return Err(corrupt(format!("manifest names image {}", manifest.image_id)));
        }
        let read_verified = |file: &str, sha: &str| -> Result<Vec<u8>> {
            if file.contains('/') || file.contains('\\') || file.starts_with('.') {
                return Err(corrupt(format!("invalid file name {file:?}")));
            }
            let path = dir.join(file);
            let data = fs::read(&path).map_err(|e| corrupt(format!("{file}: {e}")))?;
            if sha256_hex(&data) != sha {
                return Err(corrupt(format!("{file}: sha256 mismatch")));
            }
            Ok(data)
        };
        let encoder_id = encoder_id_of(&manifest.provider_id);
        let texts = [&manifest.degradation_text, &manifest.content_text];
        let mut embeddings = Vec::with_capacity(2);
        for (name, text) in ["e_d", "e_c"].into_iter().zip(texts) {
            let entry = manifest.tensors.get(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if entry.dtype != "f32le" || entry.shape.len() != 2 {
                return Err(corrupt(format!("{name}: unsupported dtype or rank")));
            }
            let raw = read_verified(&entry.file, &entry.sha256)?;
            let (n, c) = (entry.shape[0], entry.shape[1]);
            if raw.len() != n * c * 4 {
                return Err(corrupt(format!("{name}: {} bytes for shape {:?}", raw.len(), entry.shape)));
            }
            let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let emb = TextEmbedding::new(n, c, values, super::text_hash(text), encoder_id.clone())
                .map_err(|e| corrupt(format!("{name}: {e}")))?;
            embeddings.push(emb);
        }
        let e_c = embeddings.pop().expect("two embeddings");
        let e_d = embeddings.pop().expect("two embeddings");
        if manifest.reference.format != "png" {
            return Err(corrupt(format!("reference format {}", manifest.reference.format)));
        }
        let png = read_verified(&manifest.reference.file, &manifest.reference.sha256)?;
        let reference = TensorImage::decode(&png).map_err(|e| corrupt(format!("reference: {e}")))?;
        let created_at = DateTime::parse_from_rfc3339(&manifest.created_at)
            .map_err(|e| corrupt(format!("created_at: {e}")))?
            .with_timezone(&Utc);
        let bundle = PriorBundle {
            image_id: manifest.image_id,
            texts: PriorTexts {
                degradation_text: manifest.degradation_text,
                content_text: manifest.content_text,
                provider_id: manifest.provider_id,
                prompt_template_id: manifest.prompt_template_id,
            },
            e_d,
            e_c,
            reference,
            diffusion_meta: manifest.diffusion_meta,
            created_at,
        };
        bundle.texts.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(bundle)
    }
}

pub fn save_bundle(bundle: &PriorBundle, root: &Path) -> Result<PathBuf> {
    BundleStore::new(root).save(bundle)
}

pub fn load_bundle(root: &Path, image_id: &str) -> Result<PriorBundle> {
    BundleStore::new(root).load(image_id)
}
