//! Dataset manifests: one JSON object per line, paths relative to the
//! manifest file. Unknown fields survive a read/write round trip.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::scene::{derive_seed, generate_scene, load_scene, save_scene, LayeredScene, SceneConfig};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    /// Parametric scene record (JSON).
    pub scene: String,
    pub amodal_masks: BTreeMap<usize, String>,
    pub visible_masks: BTreeMap<usize, String>,
    pub labels: Vec<u8>,
    /// Present classes, bottom to top.
    pub ordering: Vec<usize>,
    pub seed: u64,
    pub split: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, name: &str) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.iter().filter(|e| e.split == name).cloned().collect(),
            root: self.root.clone(),
        }
    }

    /// Every referenced file must exist.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            let paths = [&e.image, &e.scene]
                .into_iter()
                .chain(e.amodal_masks.values())
                .chain(e.visible_masks.values());
            for p in paths {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(())
    }

    pub fn load_image(&self, e: &ManifestEntry) -> Result<Image> {
        Image::load_png(&self.resolve(&e.image))
    }

    pub fn load_scene(&self, e: &ManifestEntry) -> Result<LayeredScene> {
        load_scene(&self.resolve(&e.scene))
    }

    pub fn load_masks(&self, e: &ManifestEntry) -> Result<(BTreeMap<usize, Mask>, BTreeMap<usize, Mask>)> {
        let load = |m: &BTreeMap<usize, String>| -> Result<BTreeMap<usize, Mask>> {
            m.iter()
                .map(|(&c, p)| Ok((c, Mask::load_png(&self.resolve(p))?)))
                .collect()
        };
        Ok((load(&e.amodal_masks)?, load(&e.visible_masks)?))
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(DatasetManifest {
        entries,
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in &manifest.entries {
        serde_json::to_writer(&mut out, e).map_err(|err| Error::Json {
            path: path.to_path_buf(),
            source: err,
        })?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads `dir/manifest.jsonl`.
pub fn read_dataset(dir: &Path) -> Result<DatasetManifest> {
    read_manifest(&dir.join(MANIFEST_FILE))
}

/// Dataset-relative paths of one scene's files.
struct SceneFiles {
    image: String,
    scene: String,
    amodal: BTreeMap<usize, String>,
    visible: BTreeMap<usize, String>,
}

fn write_scene_files(dir: &Path, id: &str, scene: &LayeredScene) -> Result<SceneFiles> {
    let image = format!("images/{id}.png");
    scene.render().save_png(&dir.join(&image))?;
    let scene_path = format!("scenes/{id}.json");
    save_scene(scene, &dir.join(&scene_path))?;
    let mut amodal = BTreeMap::new();
    let mut visible = BTreeMap::new();
    for (&c, m) in &scene.amodal_masks {
        let p = format!("masks/{id}_amodal_{c}.png");
        m.save_png(&dir.join(&p))?;
        amodal.insert(c, p);
    }
    for (&c, m) in &scene.visible_masks {
        let p = format!("masks/{id}_visible_{c}.png");
        m.save_png(&dir.join(&p))?;
        visible.insert(c, p);
    }
    Ok(SceneFiles {
        image,
        scene: scene_path,
        amodal,
        visible,
    })
}

/// Generates `n` scenes with seeds derived from `(seed, index)`, writes
/// images, masks and scene records under `out_dir`, and appends their
/// entries (tagged `split`) to `out_dir/manifest.jsonl`, creating it if
/// needed. Scenes are rendered in parallel; the output does not depend on
/// the thread count.
pub fn generate_dataset(
    config: &SceneConfig,
    n: usize,
    seed: u64,
    out_dir: &Path,
    split: &str,
) -> Result<DatasetManifest> {
    config.validate()?;
    for sub in ["images", "scenes", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let hash = config.hash();
    let results = layergan_autograd::par::map_indices(n, |i| -> Result<ManifestEntry> {
        let scene_seed = derive_seed(seed, i as u64);
        let scene = generate_scene(config, scene_seed)?;
        let id = format!("{split}_{i:05}");
        let files = write_scene_files(out_dir, &id, &scene)?;
        Ok(ManifestEntry {
            id,
            image: files.image,
            scene: files.scene,
            amodal_masks: files.amodal,
            visible_masks: files.visible,
            labels: scene.label_vector.clone(),
            ordering: scene.ordering.clone(),
            seed: scene_seed,
            split: split.to_string(),
            config_hash: hash.clone(),
            extra: Default::default(),
        })
    });
    let new_entries = results.into_iter().collect::<Result<Vec<_>>>()?;

    let path = out_dir.join(MANIFEST_FILE);
    let mut manifest = if path.is_file() {
        let mut m = read_manifest(&path)?;
        m.entries.retain(|e| e.split != split);
        m
    } else {
        DatasetManifest {
            entries: Vec::new(),
            root: out_dir.to_path_buf(),
        }
    };
    manifest.entries.extend(new_entries.iter().cloned());
    write_manifest(&manifest, &path)?;
    Ok(DatasetManifest {
        entries: new_entries,
        root: out_dir.to_path_buf(),
    })
}
