//! `.kvol` volumes: a JSON sidecar `<name>.json` next to a raw payload
//! `<name>.raw` (little-endian binary32, x-fastest; `u8` for label volumes).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dims, LabelVolume, Volume3D};
use crate::error::{Error, Result};
use crate::scalar::Real;

const DTYPE_F32: &str = "f32le";
const DTYPE_U8: &str = "u8";
const ORDER: &str = "x-fastest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub dtype: String,
    pub order: String,
    pub value_range: Option<[f64; 2]>,
}

/// Sidecar and payload paths for a volume name. A trailing `.kvol`, `.json`
/// or `.raw` extension is replaced; anything else is treated as the stem.
pub fn kvol_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("kvol" | "json" | "raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("raw"))
}

fn read_sidecar(path: &Path) -> Result<(Sidecar, Dims, Vec<u8>)> {
    let (json, raw) = kvol_paths(path);
    if !json.is_file() {
        return Err(Error::MissingSidecar(json));
    }
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&json)?)?;
    if sidecar.order != ORDER {
        return Err(Error::Unsupported(format!("voxel order {:?}", sidecar.order)));
    }
    let dims = Dims::try_from(sidecar.dims)?;
    let payload = fs::read(&raw)?;
    Ok((sidecar, dims, payload))
}

fn write_pair(path: &Path, sidecar: &Sidecar, payload: &[u8]) -> Result<()> {
    let (json, raw) = kvol_paths(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(sidecar)?;
    text.push('\n');
    fs::write(json, text)?;
    fs::write(raw, payload)?;
    Ok(())
}

pub fn load_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume3D<T>> {
    let (sidecar, dims, payload) = read_sidecar(path.as_ref())?;
    if sidecar.dtype != DTYPE_F32 {
        return Err(Error::Unsupported(format!(
            "dtype {:?} for a scalar volume",
            sidecar.dtype
        )));
    }
    let mut v = Volume3D::from_vec_finite(dims, decode_f32(&payload, dims.len())?)?;
    v.value_range = sidecar.value_range.map(|[a, b]| (a, b));
    Ok(v)
}

pub fn store_volume<T: Real>(v: &Volume3D<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::with_capacity(4 * v.data().len());
    for x in v.data() {
        let f = x.to_f32().unwrap_or(f32::NAN);
        payload.extend_from_slice(&f.to_le_bytes());
    }
    let sidecar = Sidecar {
        dims: v.dims().as_array(),
        dtype: DTYPE_F32.into(),
        order: ORDER.into(),
        value_range: v.value_range.map(|(a, b)| [a, b]),
    };
    write_pair(path.as_ref(), &sidecar, &payload)
}

/// Loads a label volume; the class count is the largest label present unless given.
pub fn load_labels(path: impl AsRef<Path>, classes: Option<usize>) -> Result<LabelVolume> {
    let (sidecar, dims, payload) = read_sidecar(path.as_ref())?;
    if sidecar.dtype != DTYPE_U8 {
        return Err(Error::Unsupported(format!(
            "dtype {:?} for a label volume",
            sidecar.dtype
        )));
    }
    if payload.len() != dims.len() {
        return Err(Error::SizeMismatch {
            expected: dims.len(),
            found: payload.len(),
        });
    }
    let classes = classes.unwrap_or_else(|| payload.iter().copied().max().unwrap_or(1) as usize);
    LabelVolume::new(dims, payload, classes)
}

pub fn store_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let sidecar = Sidecar {
        dims: labels.dims().as_array(),
        dtype: DTYPE_U8.into(),
        order: ORDER.into(),
        value_range: None,
    };
    write_pair(path.as_ref(), &sidecar, labels.labels())
}

fn decode_f32<T: Real>(payload: &[u8], count: usize) -> Result<Vec<T>> {
    if payload.len() != 4 * count {
        return Err(Error::SizeMismatch {
            expected: 4 * count,
            found: payload.len(),
        });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect())
}

/// Imports a MetaImage `.mhd` header with its raw payload.
///
/// Only `NDims = 3`, `DimSize`, `ElementType = MET_FLOAT` and a detached
/// little-endian `ElementDataFile` are understood.
pub fn load_metaimage<T: Real>(path: impl AsRef<Path>) -> Result<Volume3D<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut ndims = None;
    let mut dim_size = None;
    let mut element_type = None;
    let mut data_file = None;
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "NDims" => ndims = value.parse::<usize>().ok(),
            "DimSize" => {
                let parts: Vec<usize> = value.split_whitespace().filter_map(|s| s.parse().ok()).collect();
                dim_size = Some(parts);
            }
            "ElementType" => element_type = Some(value.to_string()),
            "ElementDataFile" => data_file = Some(value.to_string()),
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" if value.eq_ignore_ascii_case("true") => {
                return Err(Error::Unsupported("big-endian MetaImage payload".into()));
            }
            "CompressedData" if value.eq_ignore_ascii_case("true") => {
                return Err(Error::Unsupported("compressed MetaImage payload".into()));
            }
            _ => {}
        }
    }
    if ndims != Some(3) {
        return Err(Error::Unsupported(format!("NDims {ndims:?}, expected 3")));
    }
    let dims = match dim_size.as_deref() {
        Some(&[a, b, c]) => Dims::new(a, b, c)?,
        other => return Err(Error::Unsupported(format!("DimSize {other:?}"))),
    };
    if element_type.as_deref() != Some("MET_FLOAT") {
        return Err(Error::Unsupported(format!(
            "ElementType {element_type:?}, expected MET_FLOAT"
        )));
    }
    let file = match data_file.as_deref() {
        Some("LOCAL") | None => return Err(Error::Unsupported("ElementDataFile must name a detached file".into())),
        Some(f) => f,
    };
    let raw = path.parent().unwrap_or(Path::new(".")).join(file);
    Volume3D::from_vec_finite(dims, decode_f32(&fs::read(raw)?, dims.len())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_raw(path: &Path, dims: [usize; 3], payload: &[u8]) {
        let sidecar = Sidecar {
            dims,
            dtype: DTYPE_F32.into(),
            order: ORDER.into(),
            value_range: None,
        };
        write_pair(path, &sidecar, payload).unwrap();
    }

    #[test]
    fn zero_volume_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zero");
        write_raw(&p, [2, 2, 2], &[0u8; 32]);
        let v: Volume3D<f64> = load_volume(&p).unwrap();
        assert_eq!(v.data(), &[0.0; 8]);
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short");
        write_raw(&p, [2, 2, 2], &[0u8; 28]);
        let err = load_volume::<f64>(&p).unwrap_err();
        assert!(matches!(
            err,
            Error::SizeMismatch {
                expected: 32,
                found: 28
            }
        ));
    }

    #[test]
    fn missing_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_volume::<f64>(dir.path().join("nope.kvol")).unwrap_err();
        assert!(matches!(err, Error::MissingSidecar(_)));
    }

    #[test]
    fn non_finite_payload_names_voxel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan");
        let mut payload = vec![0u8; 32];
        payload[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        write_raw(&p, [2, 2, 2], &payload);
        assert!(matches!(
            load_volume::<f64>(&p).unwrap_err(),
            Error::NonFinite { index: 5 }
        ));
    }

    #[test]
    fn zero_volume_payload_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.kvol");
        store_volume(&Volume3D::<f64>::zeros(Dims::new(3, 2, 2).unwrap()), &p).unwrap();
        assert_eq!(fs::read(dir.path().join("z.raw")).unwrap(), vec![0u8; 48]);
    }

    #[test]
    fn single_voxel_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one");
        store_volume(&Volume3D::filled(Dims::cube(1).unwrap(), 1.0f64), &p).unwrap();
        assert_eq!(
            fs::read(dir.path().join("one.raw")).unwrap(),
            1.0f32.to_le_bytes().to_vec()
        );
        let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("one.json")).unwrap()).unwrap();
        assert_eq!(json["dims"], serde_json::json!([1, 1, 1]));
        assert_eq!(json["dtype"], "f32le");
        assert_eq!(json["order"], "x-fastest");
        assert!(json["value_range"].is_null());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = Dims::cube(8).unwrap();
        let mut v = Volume3D::from_fn(dims, |_| rng.gen_range(-1000.0f64..3000.0));
        v.value_range = Some((-1024.0, 3071.0));
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        store_volume(&v, &a).unwrap();
        let back: Volume3D<f64> = load_volume(&a).unwrap();
        assert_eq!(back.value_range, v.value_range);
        store_volume(&back, &b).unwrap();
        assert_eq!(
            fs::read(dir.path().join("a.raw")).unwrap(),
            fs::read(dir.path().join("b.raw")).unwrap()
        );
        assert_eq!(
            fs::read(dir.path().join("a.json")).unwrap(),
            fs::read(dir.path().join("b.json")).unwrap()
        );
        for (x, y) in back.data().iter().zip(v.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(3, 2, 1).unwrap();
        let labels = LabelVolume::new(dims, vec![1, 2, 3, 3, 2, 1], 3).unwrap();
        let p = dir.path().join("labels");
        store_labels(&labels, &p).unwrap();
        assert_eq!(fs::read(dir.path().join("labels.raw")).unwrap(), vec![1, 2, 3, 3, 2, 1]);
        assert_eq!(load_labels(&p, None).unwrap(), labels);
        assert!(load_volume::<f64>(&p).is_err());
    }

    #[test]
    fn metaimage_import() {
        let dir = tempfile::tempdir().unwrap();
        let values = [0.5f32, 1.5, -2.0, 4.0, 0.0, 1.0];
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("ct.raw"), bytes).unwrap();
        let header =
            "ObjectType = Image\nNDims = 3\nDimSize = 3 2 1\nElementType = MET_FLOAT\nElementDataFile = ct.raw\n";
        fs::write(dir.path().join("ct.mhd"), header).unwrap();
        let v: Volume3D<f64> = load_metaimage(dir.path().join("ct.mhd")).unwrap();
        assert_eq!(v.dims(), Dims::new(3, 2, 1).unwrap());
        assert_eq!(v.data(), &[0.5, 1.5, -2.0, 4.0, 0.0, 1.0]);

        fs::write(dir.path().join("bad.mhd"), header.replace("MET_FLOAT", "MET_SHORT")).unwrap();
        assert!(load_metaimage::<f64>(dir.path().join("bad.mhd")).is_err());
    }

    #[test]
    fn path_forms_resolve_to_same_pair() {
        let expect = (PathBuf::from("d/v.json"), PathBuf::from("d/v.raw"));
        for p in ["d/v", "d/v.kvol", "d/v.json", "d/v.raw"] {
            assert_eq!(kvol_paths(Path::new(p)), expect);
        }
    }
}
