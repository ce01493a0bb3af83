//! Model file container: a single little-endian binary with versioned
//! sections (intrinsics, poses, points+descriptors, ANN index, named
//! locations), each protected by a CRC32.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Point3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::descriptors::{AnnError, AnnIndex, Descriptor, DescriptorError};
use crate::geometry::{CameraIntrinsics, Pose, SimilarityTransform};

use super::{FramePose, MapPoint, Model3D};

const FILE_MAGIC: &[u8; 8] = b"VMAP1\0\0\0";
const FILE_VERSION: u32 = 1;

const SEC_INTRINSICS: &[u8; 4] = b"INTR";
const SEC_META: &[u8; 4] = b"META";
const SEC_POSES: &[u8; 4] = b"POSE";
const SEC_POINTS: &[u8; 4] = b"PNTS";
const SEC_LOCATIONS: &[u8; 4] = b"NLOC";
const SEC_INDEX: &[u8; 4] = b"ANNX";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file or unsupported version")]
    VersionMismatch,
    #[error("file truncated")]
    TruncatedFile,
    #[error("checksum failure in section {section}")]
    ChecksumFailure { section: String },
    #[error("malformed model: {0}")]
    Corrupt(&'static str),
    #[error("index section: {0}")]
    Index(#[from] AnnError),
    #[error("stored descriptor invalid: {0}")]
    Descriptor(#[from] DescriptorError),
}

/// Serializes a model to `path`. Byte-identical for identical models.
pub fn serialize_model(model: &Model3D, path: &Path) -> Result<(), ModelIoError> {
    let bytes = model_to_bytes(model);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Reads a model back; the round trip is lossless and the restored index
/// answers every query identically.
pub fn deserialize_model(path: &Path) -> Result<Model3D, ModelIoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

pub fn model_to_bytes(model: &Model3D) -> Vec<u8> {
    let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();

    let mut intr = Vec::new();
    put_f64(&mut intr, model.intrinsics.fx);
    put_f64(&mut intr, model.intrinsics.fy);
    put_f64(&mut intr, model.intrinsics.cx);
    put_f64(&mut intr, model.intrinsics.cy);
    put_u32(&mut intr, model.intrinsics.width);
    put_u32(&mut intr, model.intrinsics.height);
    sections.push((*SEC_INTRINSICS, intr));

    let mut meta = Vec::new();
    match &model.alignment {
        Some(t) => {
            meta.push(1);
            put_f64(&mut meta, t.scale);
            put_quat(&mut meta, &t.rotation);
            put_vec3(&mut meta, &t.translation);
        }
        None => meta.push(0),
    }
    sections.push((*SEC_META, meta));

    let mut poses = Vec::new();
    put_u32(&mut poses, model.frame_poses.len() as u32);
    for fp in &model.frame_poses {
        put_u32(&mut poses, fp.frame_id);
        put_quat(&mut poses, &fp.pose.rotation);
        put_vec3(&mut poses, &fp.pose.translation);
    }
    sections.push((*SEC_POSES, poses));

    let dim = model
        .points
        .first()
        .and_then(|p| p.descriptors.first())
        .map(|d| d.dim())
        .unwrap_or(0) as u32;
    let mut pnts = Vec::new();
    put_u32(&mut pnts, dim);
    put_u32(&mut pnts, model.points.len() as u32);
    for point in &model.points {
        put_u32(&mut pnts, point.point_id);
        put_f64(&mut pnts, point.position.x);
        put_f64(&mut pnts, point.position.y);
        put_f64(&mut pnts, point.position.z);
        put_u32(&mut pnts, point.observations.len() as u32);
        for &(frame_id, kp) in &point.observations {
            put_u32(&mut pnts, frame_id);
            put_u32(&mut pnts, kp);
        }
        put_u32(&mut pnts, point.descriptors.len() as u32);
        for d in &point.descriptors {
            for &v in d.as_slice() {
                pnts.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    sections.push((*SEC_POINTS, pnts));

    let mut nloc = Vec::new();
    put_u32(&mut nloc, model.named_locations.len() as u32);
    for (label, p) in &model.named_locations {
        let bytes = label.as_bytes();
        nloc.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        nloc.extend_from_slice(bytes);
        put_f64(&mut nloc, p.x);
        put_f64(&mut nloc, p.y);
        put_f64(&mut nloc, p.z);
    }
    sections.push((*SEC_LOCATIONS, nloc));

    sections.push((*SEC_INDEX, model.index.to_bytes()));

    let mut out = Vec::new();
    out.extend_from_slice(FILE_MAGIC);
    put_u32(&mut out, FILE_VERSION);
    put_u32(&mut out, sections.len() as u32);
    for (tag, payload) in sections {
        out.extend_from_slice(&tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        put_u32(&mut out, crc);
    }
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model3D, ModelIoError> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(8)? != FILE_MAGIC {
        return Err(ModelIoError::VersionMismatch);
    }
    if r.u32()? != FILE_VERSION {
        return Err(ModelIoError::VersionMismatch);
    }
    let section_count = r.u32()? as usize;
    let mut sections: Vec<([u8; 4], &[u8])> = Vec::with_capacity(section_count);
    for _ in 0..section_count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        let stored_crc = r.u32()?;
        if crc32fast::hash(payload) != stored_crc {
            return Err(ModelIoError::ChecksumFailure {
                section: String::from_utf8_lossy(&tag).into_owned(),
            });
        }
        sections.push((tag, payload));
    }
    let find = |tag: &[u8; 4]| -> Result<&[u8], ModelIoError> {
        sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| *p)
            .ok_or(ModelIoError::Corrupt("missing section"))
    };

    let mut c = Cursor { bytes: find(SEC_INTRINSICS)?, pos: 0 };
    let intrinsics = CameraIntrinsics::new(c.f64()?, c.f64()?, c.f64()?, c.f64()?, c.u32()?, c.u32()?);

    let mut c = Cursor { bytes: find(SEC_META)?, pos: 0 };
    let alignment = match c.u8()? {
        0 => None,
        1 => Some(SimilarityTransform::new(c.f64()?, c.quat()?, c.vec3()?)),
        _ => return Err(ModelIoError::Corrupt("bad alignment flag")),
    };

    let mut c = Cursor { bytes: find(SEC_POSES)?, pos: 0 };
    let pose_count = c.u32()? as usize;
    let mut frame_poses = Vec::with_capacity(pose_count);
    for _ in 0..pose_count {
        frame_poses.push(FramePose {
            frame_id: c.u32()?,
            pose: Pose::new(c.quat()?, c.vec3()?),
        });
    }

    let mut c = Cursor { bytes: find(SEC_POINTS)?, pos: 0 };
    let dim = c.u32()? as usize;
    let point_count = c.u32()? as usize;
    let mut points = Vec::with_capacity(point_count);
    for _ in 0..point_count {
        let point_id = c.u32()?;
        let position = Point3::new(c.f64()?, c.f64()?, c.f64()?);
        let obs_count = c.u32()? as usize;
        let mut observations = Vec::with_capacity(obs_count);
        for _ in 0..obs_count {
            observations.push((c.u32()?, c.u32()?));
        }
        let desc_count = c.u32()? as usize;
        let mut descriptors = Vec::with_capacity(desc_count);
        for _ in 0..desc_count {
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f32::from_bits(c.u32()?));
            }
            descriptors.push(Descriptor::new(values)?);
        }
        points.push(MapPoint {
            point_id,
            position,
            observations,
            descriptors,
        });
    }

    let mut c = Cursor { bytes: find(SEC_LOCATIONS)?, pos: 0 };
    let loc_count = c.u32()? as usize;
    let mut named_locations = Vec::with_capacity(loc_count);
    for _ in 0..loc_count {
        let len = c.u16()? as usize;
        let label = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| ModelIoError::Corrupt("bad label encoding"))?;
        named_locations.push((label, Point3::new(c.f64()?, c.f64()?, c.f64()?)));
    }

    let index = AnnIndex::from_bytes(find(SEC_INDEX)?)?;
    Model3D::from_parts(points, frame_poses, intrinsics, alignment, named_locations, index)
        .map_err(|e| ModelIoError::Corrupt(e))
}

impl Model3D {
    /// Reassembles a model around an already-built index (used by the
    /// deserializer so the stored tree topology is preserved exactly).
    pub(crate) fn from_parts(
        points: Vec<MapPoint>,
        frame_poses: Vec<FramePose>,
        intrinsics: CameraIntrinsics,
        alignment: Option<SimilarityTransform>,
        named_locations: Vec<(String, Point3<f64>)>,
        index: AnnIndex,
    ) -> Result<Self, &'static str> {
        let mut table = Vec::new();
        let mut descriptor_to_point = Vec::new();
        let mut point_row_by_id = BTreeMap::new();
        for (row, point) in points.iter().enumerate() {
            if point_row_by_id.insert(point.point_id, row).is_some() {
                return Err("duplicate point id");
            }
            for d in &point.descriptors {
                table.push(d.clone());
                descriptor_to_point.push(point.point_id);
            }
        }
        if index.len() != table.len() {
            return Err("index size does not match stored descriptors");
        }
        Ok(Self {
            points,
            frame_poses,
            intrinsics,
            alignment,
            index,
            descriptor_to_point,
            named_locations,
            descriptor_table: table,
            point_row_by_id,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn put_vec3(out: &mut Vec<u8>, v: &Vector3<f64>) {
    put_f64(out, v.x);
    put_f64(out, v.y);
    put_f64(out, v.z);
}

fn put_quat(out: &mut Vec<u8>, q: &UnitQuaternion<f64>) {
    put_f64(out, q.w);
    put_f64(out, q.i);
    put_f64(out, q.j);
    put_f64(out, q.k);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelIoError::TruncatedFile);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelIoError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn vec3(&mut self) -> Result<Vector3<f64>, ModelIoError> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn quat(&mut self) -> Result<UnitQuaternion<f64>, ModelIoError> {
        let (w, i, j, k) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        Ok(UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, i, j, k)))
    }
}
