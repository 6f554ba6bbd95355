use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use diffyolo_nn::{write_atomic, Container, NnError};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{extract_taps, image_hash, ExtractionConfig, FeatureMap, FeatureTaps, Provenance};
use crate::data::AnnotatedImage;
use crate::ddpm::DdpmCheckpoint;
use crate::error::{CoreError, Result};
use crate::hashing::{canonical_json, to_hex};
use crate::image::ImageTensor;
use crate::FEATURE_MAGIC;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const KIND: &str = "feature-taps";

/// Writes the taps of one image; returns the file checksum.
pub fn save_feature(taps: &FeatureTaps, path: &Path) -> Result<String> {
    let mut c = Container::new(FEATURE_MAGIC, KIND);
    c.config = canonical_json(&taps.provenance)?;
    c.tensors = taps.maps.iter().map(|m| (format!("tap.{}", m.level), m.data.clone())).collect();
    Ok(c.write(path)?)
}

fn parse_feature(bytes: &[u8], path: &Path) -> Result<FeatureTaps> {
    let c = Container::from_bytes(bytes, FEATURE_MAGIC).map_err(|e| match e {
        NnError::Checksum(_) | NnError::Container(_) | NnError::Shape(_) => CoreError::CorruptCache(path.to_path_buf()),
        other => other.into(),
    })?;
    if c.kind != KIND {
        return Err(CoreError::CorruptCache(path.to_path_buf()));
    }
    let provenance: Provenance =
        serde_json::from_str(&c.config).map_err(|_| CoreError::CorruptCache(path.to_path_buf()))?;
    let mut maps = Vec::with_capacity(c.tensors.len());
    for (name, data) in c.tensors {
        let level = name
            .strip_prefix("tap.")
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| CoreError::CorruptCache(path.to_path_buf()))?;
        maps.push(FeatureMap { level, timestep: provenance.timestep, data });
    }
    Ok(FeatureTaps { maps, provenance })
}

fn check_provenance(p: &Provenance, ddpm_hash: &str, cfg: &ExtractionConfig, path: &Path) -> Result<()> {
    let stale = |reason: String| Err(CoreError::StaleCache { path: path.to_path_buf(), reason });
    let mut levels = cfg.tap_levels.clone();
    levels.sort_unstable();
    if p.ddpm_hash != ddpm_hash {
        return stale(format!("built with diffusion checkpoint {}, experiment uses {ddpm_hash}", p.ddpm_hash));
    }
    if p.timestep != cfg.timestep {
        return stale(format!("timestep {} != {}", p.timestep, cfg.timestep));
    }
    if p.tap_levels != levels {
        return stale(format!("tap levels {:?} != {levels:?}", p.tap_levels));
    }
    if p.resolution != cfg.resolution {
        return stale(format!("resolution {} != {}", p.resolution, cfg.resolution));
    }
    if p.eps_seed != cfg.eps_seed(&p.image_id) {
        return stale(format!("noise seed {} does not derive from seed {}", p.eps_seed, cfg.seed));
    }
    Ok(())
}

/// Loads taps and checks they were produced by `ddpm_hash` under `cfg`.
/// A bad checksum gives `CorruptCache`; a provenance mismatch `StaleCache`.
pub fn load_feature(path: &Path, ddpm_hash: &str, cfg: &ExtractionConfig) -> Result<FeatureTaps> {
    let taps = parse_feature(&fs::read(path)?, path)?;
    check_provenance(&taps.provenance, ddpm_hash, cfg, path)?;
    Ok(taps)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub id: String,
    /// Relative to the cache directory.
    pub path: String,
    pub checksum: String,
    pub image_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub ddpm_checkpoint_hash: String,
    pub extraction: ExtractionConfig,
    pub entries: Vec<CacheEntry>,
}

impl CacheManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: CacheManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(CoreError::StaleCache {
                path: dir.join(MANIFEST_FILE),
                reason: format!("manifest version {} (expected {MANIFEST_VERSION})", m.version),
            });
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Clone, Debug)]
pub struct CacheBuildReport {
    pub manifest: CacheManifest,
    pub manifest_path: PathBuf,
    pub extracted: usize,
    pub skipped: usize,
    /// `(image id, error)` for every image that could not be cached.
    pub failed: Vec<(String, String)>,
}

fn file_name(id: &str) -> String {
    let safe: String = id
        .replace('/', "__")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.dyfc")
}

/// Extracts and stores the taps of every image under `out_dir`, with a
/// manifest. Entries that already hold valid, matching features are kept;
/// the manifest is only rewritten when its content changes.
pub fn build_cache(
    images: &[AnnotatedImage],
    ddpm: &DdpmCheckpoint,
    cfg: &ExtractionConfig,
    out_dir: &Path,
) -> Result<CacheBuildReport> {
    cfg.validate_against(&ddpm.unet, ddpm.schedule.steps)?;
    fs::create_dir_all(out_dir)?;
    let mut names = HashSet::new();
    let mut entries = Vec::with_capacity(images.len());
    let (mut extracted, mut skipped) = (0, 0);
    let mut failed = Vec::new();
    for item in images {
        let name = file_name(&item.id);
        if !names.insert(name.clone()) {
            failed.push((item.id.clone(), format!("file name `{name}` collides with another id")));
            continue;
        }
        let path = out_dir.join(&name);
        let hash = image_hash(&item.image);
        if let Ok(bytes) = fs::read(&path) {
            let valid = parse_feature(&bytes, &path)
                .and_then(|t| check_provenance(&t.provenance, &ddpm.hash, cfg, &path).map(|_| t))
                .is_ok_and(|t| t.provenance.image_id == item.id && t.provenance.image_hash == hash);
            if valid {
                let checksum = to_hex(&bytes[bytes.len() - 32..]);
                entries.push(CacheEntry { id: item.id.clone(), path: name, checksum, image_hash: hash });
                skipped += 1;
                continue;
            }
            warn!("re-extracting invalid or stale cache entry {}", path.display());
        }
        match extract_taps(&item.image, &item.id, ddpm, cfg).and_then(|t| save_feature(&t, &path)) {
            Ok(checksum) => {
                entries.push(CacheEntry { id: item.id.clone(), path: name, checksum, image_hash: hash });
                extracted += 1;
            }
            Err(e) => failed.push((item.id.clone(), e.to_string())),
        }
    }
    let manifest = CacheManifest {
        version: MANIFEST_VERSION,
        ddpm_checkpoint_hash: ddpm.hash.clone(),
        extraction: cfg.clone(),
        entries,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let text = manifest.to_json()?;
    if fs::read_to_string(&manifest_path).ok().as_deref() != Some(text.as_str()) {
        write_atomic(&manifest_path, text.as_bytes())?;
    }
    info!("feature cache {}: {extracted} extracted, {skipped} reused, {} failed", out_dir.display(), failed.len());
    Ok(CacheBuildReport { manifest, manifest_path, extracted, skipped, failed })
}

/// An opened, provenance-checked cache directory.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    manifest: CacheManifest,
    index: BTreeMap<String, usize>,
}

impl FeatureCache {
    /// Opens `dir` for an experiment using `ddpm_hash` and `cfg`; a cache
    /// built from anything else is reported as stale.
    pub fn open(dir: &Path, ddpm_hash: &str, cfg: &ExtractionConfig) -> Result<Self> {
        let manifest = CacheManifest::read(dir)?;
        let path = dir.join(MANIFEST_FILE);
        if manifest.ddpm_checkpoint_hash != ddpm_hash {
            return Err(CoreError::StaleCache {
                path,
                reason: format!(
                    "built with diffusion checkpoint {}, experiment uses {ddpm_hash}",
                    manifest.ddpm_checkpoint_hash
                ),
            });
        }
        if &manifest.extraction != cfg {
            return Err(CoreError::StaleCache { path, reason: "extraction config differs".into() });
        }
        let index = manifest.entries.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
        Ok(Self { dir: dir.to_path_buf(), manifest, index })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Loads the taps of `id`. When `image` is given its hash must match
    /// the one the entry was built from.
    pub fn load(&self, id: &str, image: Option<&ImageTensor>) -> Result<FeatureTaps> {
        let entry = self
            .index
            .get(id)
            .map(|&i| &self.manifest.entries[i])
            .ok_or_else(|| CoreError::StaleCache { path: self.dir.join(MANIFEST_FILE), reason: format!("no entry for `{id}`") })?;
        let path = self.dir.join(&entry.path);
        let bytes = fs::read(&path)?;
        if bytes.len() < 32 || to_hex(&bytes[bytes.len() - 32..]) != entry.checksum {
            return Err(CoreError::CorruptCache(path));
        }
        let taps = parse_feature(&bytes, &path)?;
        check_provenance(&taps.provenance, &self.manifest.ddpm_checkpoint_hash, &self.manifest.extraction, &path)?;
        if taps.provenance.image_id != id {
            return Err(CoreError::StaleCache { path, reason: format!("entry holds `{}`", taps.provenance.image_id) });
        }
        if let Some(img) = image {
            if image_hash(img) != taps.provenance.image_hash {
                return Err(CoreError::StaleCache { path, reason: "image content changed since extraction".into() });
            }
        }
        Ok(taps)
    }
}

/// Where diffusion features come from during training and evaluation.
#[derive(Clone, Copy, Debug)]
pub enum FeatureSource<'a> {
    Cached(&'a FeatureCache),
    OnTheFly { ddpm: &'a DdpmCheckpoint, cfg: &'a ExtractionConfig },
}

impl FeatureSource<'_> {
    pub fn taps(&self, id: &str, image: &ImageTensor) -> Result<FeatureTaps> {
        match self {
            FeatureSource::Cached(cache) => cache.load(id, Some(image)),
            FeatureSource::OnTheFly { ddpm, cfg } => extract_taps(image, id, ddpm, cfg),
        }
    }

    pub fn ddpm_hash(&self) -> &str {
        match self {
            FeatureSource::Cached(cache) => &cache.manifest.ddpm_checkpoint_hash,
            FeatureSource::OnTheFly { ddpm, .. } => &ddpm.hash,
        }
    }

    pub fn config(&self) -> &ExtractionConfig {
        match self {
            FeatureSource::Cached(cache) => &cache.manifest.extraction,
            FeatureSource::OnTheFly { cfg, .. } => cfg,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{image, tiny_cfg, tiny_ddpm};
    use super::*;
    use crate::data::AnnotatedImage;

    fn dataset(n: usize) -> Vec<AnnotatedImage> {
        (0..n).map(|k| AnnotatedImage { id: format!("g/img{k}"), image: image(k), boxes: vec![] }).collect()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ddpm = tiny_ddpm();
        let taps = extract_taps(&image(0), "a", &ddpm, &tiny_cfg()).unwrap();
        let p = dir.path().join("a.dyfc");
        save_feature(&taps, &p).unwrap();
        assert!(load_feature(&p, &ddpm.hash, &tiny_cfg()).unwrap().bit_eq(&taps));
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let ddpm = tiny_ddpm();
        let taps = extract_taps(&image(0), "a", &ddpm, &tiny_cfg()).unwrap();
        let p = dir.path().join("a.dyfc");
        save_feature(&taps, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 0x01;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_feature(&p, &ddpm.hash, &tiny_cfg()), Err(CoreError::CorruptCache(_))));
    }

    #[test]
    fn other_checkpoint_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        let ddpm = tiny_ddpm();
        let taps = extract_taps(&image(0), "a", &ddpm, &tiny_cfg()).unwrap();
        let p = dir.path().join("a.dyfc");
        save_feature(&taps, &p).unwrap();
        assert!(matches!(load_feature(&p, "ddpm-b", &tiny_cfg()), Err(CoreError::StaleCache { .. })));
        let other = ExtractionConfig { timestep: 10, ..tiny_cfg() };
        assert!(matches!(load_feature(&p, &ddpm.hash, &other), Err(CoreError::StaleCache { .. })));
        let build = build_cache(&dataset(1), &ddpm, &tiny_cfg(), dir.path()).unwrap();
        assert!(build.failed.is_empty());
        assert!(matches!(FeatureCache::open(dir.path(), "ddpm-b", &tiny_cfg()), Err(CoreError::StaleCache { .. })));
    }

    #[test]
    fn empty_dataset_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let r = build_cache(&[], &tiny_ddpm(), &tiny_cfg(), dir.path()).unwrap();
        assert!(r.manifest.entries.is_empty() && r.failed.is_empty());
        assert!(dir.path().join(MANIFEST_FILE).is_file());
    }

    #[test]
    fn rebuild_is_idempotent_and_repairs() {
        let dir = tempfile::tempdir().unwrap();
        let ddpm = tiny_ddpm();
        let data = dataset(4);
        let first = build_cache(&data, &ddpm, &tiny_cfg(), dir.path()).unwrap();
        assert_eq!((first.extracted, first.skipped), (4, 0));
        let stamp = fs::metadata(&first.manifest_path).unwrap().modified().unwrap();
        let second = build_cache(&data, &ddpm, &tiny_cfg(), dir.path()).unwrap();
        assert_eq!((second.extracted, second.skipped), (0, 4));
        assert_eq!(fs::metadata(&second.manifest_path).unwrap().modified().unwrap(), stamp);
        assert_eq!(first.manifest, second.manifest);

        let victim = dir.path().join(&first.manifest.entries[2].path);
        let mut bytes = fs::read(&victim).unwrap();
        bytes[40] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        let third = build_cache(&data, &ddpm, &tiny_cfg(), dir.path()).unwrap();
        assert_eq!((third.extracted, third.skipped), (1, 3));
        assert_eq!(third.manifest, first.manifest);
    }

    #[test]
    fn cached_equals_on_the_fly() {
        let dir = tempfile::tempdir().unwrap();
        let ddpm = tiny_ddpm();
        let cfg = tiny_cfg();
        let data = dataset(3);
        build_cache(&data, &ddpm, &cfg, dir.path()).unwrap();
        let cache = FeatureCache::open(dir.path(), &ddpm.hash, &cfg).unwrap();
        for item in &data {
            let a = FeatureSource::Cached(&cache).taps(&item.id, &item.image).unwrap();
            let b = FeatureSource::OnTheFly { ddpm: &ddpm, cfg: &cfg }.taps(&item.id, &item.image).unwrap();
            assert!(a.bit_eq(&b));
        }
        assert!(matches!(cache.load(&data[0].id, Some(&image(9))), Err(CoreError::StaleCache { .. })));
        assert!(cache.load("missing", None).is_err());
    }

    #[test]
    fn file_names_are_flat() {
        assert_eq!(file_name("group1/00041/x"), "group1__00041__x.dyfc");
        assert_eq!(file_name("a b"), "a_b.dyfc");
    }
}
