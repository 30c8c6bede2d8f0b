//! IDX-format ingestion for the optional real-data path. Big-endian
//! headers, magic 0x00000803 for image tensors and 0x00000801 for labels.

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use std::fs;
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::NotIdx(format!("truncated header reading {what}")))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Load an IDX image/label file pair into a dataset pool: features scaled
/// to [0, 1] and flattened, labels in [0, 10). Fails closed on any header
/// or length mismatch.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
) -> Result<ClientDataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let magic = read_u32(&image_bytes, 0, "image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::NotIdx(format!(
            "image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n_images = read_u32(&image_bytes, 4, "image count")? as usize;
    let rows = read_u32(&image_bytes, 8, "image rows")? as usize;
    let cols = read_u32(&image_bytes, 12, "image cols")? as usize;

    let magic = read_u32(&label_bytes, 0, "label magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::NotIdx(format!(
            "label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n_labels = read_u32(&label_bytes, 4, "label count")? as usize;

    if n_images != n_labels {
        return Err(Error::IdxCountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let take = limit.map_or(n_images, |l| l.min(n_images));
    let pixels = rows * cols;
    let need_image_bytes = 16 + n_images * pixels;
    if image_bytes.len() < need_image_bytes {
        return Err(Error::NotIdx(format!(
            "image payload truncated: {} bytes, header declares {need_image_bytes}",
            image_bytes.len()
        )));
    }
    let need_label_bytes = 8 + n_labels;
    if label_bytes.len() < need_label_bytes {
        return Err(Error::NotIdx(format!(
            "label payload truncated: {} bytes, header declares {need_label_bytes}",
            label_bytes.len()
        )));
    }

    let mut data = Vec::with_capacity(take * pixels);
    for i in 0..take {
        let start = 16 + i * pixels;
        data.extend(
            image_bytes[start..start + pixels]
                .iter()
                .map(|&b| b as f64 / 255.0),
        );
    }
    let mut labels = Vec::with_capacity(take);
    for i in 0..take {
        let l = label_bytes[8 + i] as usize;
        if l >= 10 {
            return Err(Error::NotIdx(format!("label {l} outside [0, 10)")));
        }
        labels.push(l);
    }

    Ok(ClientDataset {
        features: Matrix::from_vec(take, pixels, data)?,
        labels,
        distribution_tag: "idx".into(),
        round: 0,
        client_id: 0,
    })
}
