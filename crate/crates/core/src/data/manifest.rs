//! Dataset directories: a `bag_id,label,split,path` manifest, one SMB1 file
//! per bag, and an optional long-form latent-label sidecar.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{decode_bag, encode_bag, Bag, Dataset, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
/// Sidecar with rows `bag_id,patch_index,latent_label`.
pub const LATENT_FILE: &str = "latent.csv";
const BAG_DIR: &str = "bags";

/// Loads the manifest at `path` and every bag it references. Bag paths are
/// relative to the manifest's directory. A `latent.csv` next to the manifest
/// is attached when present.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Dataset> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["bag_id", "label", "split", "path"] {
        return Err(Error::Format(format!(
            "{}: header must be bag_id,label,split,path",
            path.display()
        )));
    }
    let mut bags = Vec::new();
    let mut splits = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let bag_id = rec[0].to_string();
        let label: usize = rec[1].trim().parse().map_err(|_| {
            Error::Validation(format!("manifest row {row}: bad label {:?}", &rec[1]))
        })?;
        let split: Split = rec[2].trim().parse()?;
        let bag_path = root.join(&rec[3]);
        let bytes = fs::read(&bag_path).map_err(|source| Error::ManifestIo {
            row,
            bag_id: bag_id.clone(),
            path: bag_path.clone(),
            source,
        })?;
        bags.push(decode_bag(&bytes, &bag_id, label)?);
        splits.push(split);
    }
    let latent_path = root.join(LATENT_FILE);
    if latent_path.exists() {
        attach_latent(&mut bags, &latent_path)?;
    }
    Dataset::new(bags, splits, num_classes)
}

fn attach_latent(bags: &mut [Bag], path: &Path) -> Result<()> {
    let mut by_id: HashMap<String, Vec<(usize, u8)>> = HashMap::new();
    let mut rdr = csv::Reader::from_path(path)?;
    for rec in rdr.records() {
        let rec = rec?;
        let idx: usize = rec[1]
            .parse()
            .map_err(|_| Error::Format(format!("latent: bad patch index {:?}", &rec[1])))?;
        let y: u8 = rec[2]
            .parse()
            .map_err(|_| Error::Format(format!("latent: bad label {:?}", &rec[2])))?;
        by_id.entry(rec[0].to_string()).or_default().push((idx, y));
    }
    for bag in bags.iter_mut() {
        if let Some(rows) = by_id.remove(&bag.bag_id) {
            let mut lat = vec![0u8; bag.num_instances()];
            for (i, y) in rows {
                *lat.get_mut(i).ok_or_else(|| {
                    Error::Format(format!("latent: patch {i} out of range for {}", bag.bag_id))
                })? = y;
            }
            bag.latent_labels = Some(lat);
            bag.validate()?;
        }
    }
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `dataset` as a directory loadable by [`load_manifest`]. Returns
/// the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    create_dir(&dir.join(BAG_DIR))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::io(&manifest, e.into()))?;
    w.write_record(["bag_id", "label", "split", "path"])?;
    let mut latent_rows = Vec::new();
    for (bag, split) in dataset.bags.iter().zip(&dataset.splits) {
        let rel = format!("{BAG_DIR}/{}.smb", bag.bag_id);
        let file = dir.join(&rel);
        fs::write(&file, encode_bag(bag)?).map_err(|e| Error::io(&file, e))?;
        w.write_record([
            bag.bag_id.as_str(),
            &bag.label.to_string(),
            split.as_str(),
            &rel,
        ])?;
        if let Some(lat) = &bag.latent_labels {
            for (i, y) in lat.iter().enumerate() {
                latent_rows.push([bag.bag_id.clone(), i.to_string(), y.to_string()]);
            }
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    if !latent_rows.is_empty() {
        let lp = dir.join(LATENT_FILE);
        let mut lw = csv::Writer::from_path(&lp).map_err(|e| Error::io(&lp, e.into()))?;
        lw.write_record(["bag_id", "patch_index", "latent_label"])?;
        for r in latent_rows {
            lw.write_record(&r)?;
        }
        lw.flush().map_err(|e| Error::io(&lp, e))?;
    }
    Ok(manifest)
}
