use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Result};
use crate::io::io_err;
use crate::labels::{AmodalSegment, ClassId, InstanceAnnotation};
use crate::mask::BinaryMask;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    category: ClassId,
    score: f64,
    visible: Vec<u32>,
    amodal: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstancesFile {
    height: u32,
    width: u32,
    instances: Vec<InstanceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRecord {
    id: u32,
    category: ClassId,
    score: f64,
    mask: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentsFile {
    height: u32,
    width: u32,
    segments: Vec<SegmentRecord>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, json: String) -> Result<()> {
    fs::write(path, json).map_err(|e| io_err(path, e))
}

pub fn instances_from_json(text: &str) -> Result<((u32, u32), Vec<InstanceAnnotation>)> {
    let file: InstancesFile = serde_json::from_str(text)?;
    let (h, w) = (file.height, file.width);
    let mut out = Vec::with_capacity(file.instances.len());
    for (i, r) in file.instances.into_iter().enumerate() {
        let inst = InstanceAnnotation {
            category: r.category,
            score: r.score,
            visible: BinaryMask::from_runs(h, w, r.visible)?,
            amodal: BinaryMask::from_runs(h, w, r.amodal)?,
        };
        inst.validate(i)?;
        out.push(inst);
    }
    Ok(((h, w), out))
}

pub fn instances_to_json(dims: (u32, u32), instances: &[InstanceAnnotation]) -> Result<String> {
    let mut records = Vec::with_capacity(instances.len());
    for inst in instances {
        if inst.dims() != dims {
            return Err(dims_mismatch(dims, inst.dims()));
        }
        records.push(InstanceRecord {
            category: inst.category,
            score: inst.score,
            visible: inst.visible.runs().to_vec(),
            amodal: inst.amodal.runs().to_vec(),
        });
    }
    Ok(serde_json::to_string(&InstancesFile {
        height: dims.0,
        width: dims.1,
        instances: records,
    })?)
}

/// `{"height","width","instances":[{"category","score","visible","amodal"}]}`
/// with column-major RLE runs. Visible-inside-amodal is checked per
/// instance.
pub fn load_instances(path: &Path) -> Result<((u32, u32), Vec<InstanceAnnotation>)> {
    instances_from_json(&read(path)?)
}

pub fn save_instances(path: &Path, dims: (u32, u32), instances: &[InstanceAnnotation]) -> Result<()> {
    write(path, instances_to_json(dims, instances)?)
}

/// Full-extent segments of an amodal panoptic output.
pub fn load_amodal_segments(path: &Path) -> Result<((u32, u32), Vec<AmodalSegment>)> {
    let file: SegmentsFile = serde_json::from_str(&read(path)?)?;
    let (h, w) = (file.height, file.width);
    let segments = file
        .segments
        .into_iter()
        .map(|s| {
            Ok(AmodalSegment {
                id: s.id,
                class_id: s.category,
                score: s.score,
                mask: BinaryMask::from_runs(h, w, s.mask)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(((h, w), segments))
}

pub fn save_amodal_segments(path: &Path, dims: (u32, u32), segments: &[AmodalSegment]) -> Result<()> {
    let mut records = Vec::with_capacity(segments.len());
    for s in segments {
        if s.mask.dims() != dims {
            return Err(dims_mismatch(dims, s.mask.dims()));
        }
        records.push(SegmentRecord {
            id: s.id,
            category: s.class_id,
            score: s.score,
            mask: s.mask.runs().to_vec(),
        });
    }
    write(
        path,
        serde_json::to_string(&SegmentsFile {
            height: dims.0,
            width: dims.1,
            segments: records,
        })?,
    )
}
