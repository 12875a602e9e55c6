//! File codecs: the 16-byte-per-point velodyne format, packed 32-bit
//! semantic/instance label words, and this toolkit's own scene container.
//!
//! Label words are little-endian u32 with the semantic id in the lower 16
//! bits and the instance id in the upper 16. The scene container is:
//!
//! ```text
//! magic  8 B   "PCSCENE1"
//! count  u32   point count
//! flags  u8    bit 0: remission channel present
//! xyz    count × 3 × f64
//! rem    count × f64          (only when flagged)
//! sem    count × u32
//! inst   count × u32
//! ```
//!
//! All integers and floats are little-endian. Codecs are exact inverses on
//! valid data.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{ClassTaxonomy, PanopticLabel, Point3, Scene};

const SCENE_MAGIC: &[u8; 8] = b"PCSCENE1";
const VELODYNE_RECORD: usize = 16;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Read consecutive little-endian f32 quadruples (x, y, z, remission).
pub fn read_velodyne_bin(path: impl AsRef<Path>) -> Result<Vec<Point3>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() % VELODYNE_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % VELODYNE_RECORD;
        return Err(format_err(
            path,
            format!("truncated record at byte offset {offset}"),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / VELODYNE_RECORD);
    for (i, record) in bytes.chunks_exact(VELODYNE_RECORD).enumerate() {
        let f = |k: usize| {
            f32::from_le_bytes(record[4 * k..4 * k + 4].try_into().expect("4-byte slice"))
        };
        let point = Point3::with_remission(f(0) as f64, f(1) as f64, f(2) as f64, f(3) as f64)
            .map_err(|e| format_err(path, format!("point {i}: {e}")))?;
        points.push(point);
    }
    Ok(points)
}

/// Write points in the velodyne layout; missing remission is stored as 0.
pub fn write_velodyne_bin(path: impl AsRef<Path>, points: &[Point3]) -> Result<()> {
    let mut bytes = Vec::with_capacity(points.len() * VELODYNE_RECORD);
    for p in points {
        for v in [p.x, p.y, p.z, p.remission.unwrap_or(0.0)] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Pack a (semantic, instance) pair into one label word.
pub fn pack_label(sem: u32, inst: u32) -> Result<u32> {
    if sem > u16::MAX as u32 {
        return Err(Error::invalid(format!(
            "semantic id {sem} exceeds the 16-bit label range"
        )));
    }
    if inst > u16::MAX as u32 {
        return Err(Error::invalid(format!(
            "instance id {inst} exceeds the 16-bit label range"
        )));
    }
    Ok((inst << 16) | sem)
}

/// Split a label word into (semantic, instance).
pub fn unpack_label(word: u32) -> (u32, u32) {
    (word & 0xFFFF, word >> 16)
}

/// Read per-point label words.
pub fn read_labels(path: impl AsRef<Path>) -> Result<(Vec<u32>, Vec<u32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        let offset = bytes.len() - bytes.len() % 4;
        return Err(format_err(
            path,
            format!("truncated label word at byte offset {offset}"),
        ));
    }
    let mut sem = Vec::with_capacity(bytes.len() / 4);
    let mut inst = Vec::with_capacity(bytes.len() / 4);
    for word in bytes.chunks_exact(4) {
        let (s, i) = unpack_label(u32::from_le_bytes(word.try_into().expect("4-byte slice")));
        sem.push(s);
        inst.push(i);
    }
    Ok((sem, inst))
}

/// Write per-point label words.
pub fn write_labels(path: impl AsRef<Path>, sem: &[u32], inst: &[u32]) -> Result<()> {
    if sem.len() != inst.len() {
        return Err(Error::LengthMismatch {
            context: "sem vs inst",
            left: sem.len(),
            right: inst.len(),
        });
    }
    let mut bytes = Vec::with_capacity(sem.len() * 4);
    for (&s, &i) in sem.iter().zip(inst) {
        bytes.extend_from_slice(&pack_label(s, i)?.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Write a fused panoptic result in the packed label format.
pub fn write_panoptic(path: impl AsRef<Path>, label: &PanopticLabel) -> Result<()> {
    write_labels(path, label.sem(), label.inst())
}

/// Read a fused panoptic result.
pub fn read_panoptic(path: impl AsRef<Path>, taxonomy: &ClassTaxonomy) -> Result<PanopticLabel> {
    let (sem, inst) = read_labels(path)?;
    PanopticLabel::new(sem, inst, taxonomy)
}

/// Load a point file and its paired label file into a scene.
pub fn read_kitti_scene(
    velodyne: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    remap: Option<&ClassRemap>,
    taxonomy: &ClassTaxonomy,
) -> Result<Scene> {
    let points = read_velodyne_bin(velodyne)?;
    let (mut sem, inst) = read_labels(&labels)?;
    if points.len() != sem.len() {
        return Err(Error::LengthMismatch {
            context: "points vs paired labels",
            left: points.len(),
            right: sem.len(),
        });
    }
    if let Some(remap) = remap {
        remap.apply(&mut sem);
    }
    Scene::new(points, sem, inst, taxonomy)
}

/// Config-driven table mapping raw dataset class ids onto evaluated ids.
/// Unmapped ids pass through unchanged.
#[derive(Debug, Clone, Default)]
pub struct ClassRemap(BTreeMap<u32, u32>);

impl ClassRemap {
    pub fn new(table: BTreeMap<u32, u32>) -> Self {
        ClassRemap(table)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(&self, sem: &mut [u32]) {
        for s in sem {
            if let Some(&mapped) = self.0.get(s) {
                *s = mapped;
            }
        }
    }
}

/// Write the internal scene container.
pub fn write_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    let has_remission = scene
        .points()
        .first()
        .is_some_and(|p| p.remission.is_some());
    if scene
        .points()
        .iter()
        .any(|p| p.remission.is_some() != has_remission)
    {
        return Err(Error::invalid(
            "scene mixes points with and without remission",
        ));
    }

    let mut out = Vec::with_capacity(13 + scene.len() * 32);
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&(scene.len() as u32).to_le_bytes());
    out.push(u8::from(has_remission));
    for p in scene.points() {
        out.extend_from_slice(&p.x.to_le_bytes());
        out.extend_from_slice(&p.y.to_le_bytes());
        out.extend_from_slice(&p.z.to_le_bytes());
    }
    if has_remission {
        for p in scene.points() {
            out.extend_from_slice(&p.remission.expect("checked above").to_le_bytes());
        }
    }
    for &s in scene.sem_gt() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for &i in scene.inst_gt() {
        out.extend_from_slice(&i.to_le_bytes());
    }

    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Read the internal scene container.
pub fn read_scene(path: impl AsRef<Path>, taxonomy: &ClassTaxonomy) -> Result<Scene> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < 13 || &bytes[..8] != SCENE_MAGIC {
        return Err(format_err(path, "missing scene magic"));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice")) as usize;
    let has_remission = match bytes[12] {
        0 => false,
        1 => true,
        other => return Err(format_err(path, format!("unknown flags byte {other}"))),
    };
    let expected =
        13 + count * 24 + if has_remission { count * 8 } else { 0 } + count * 8;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes for {count} points, found {}", bytes.len()),
        ));
    }

    let f64_at = |offset: usize| {
        f64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8-byte slice"))
    };
    let u32_at = |offset: usize| {
        u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
    };

    let mut cursor = 13;
    let mut coords = Vec::with_capacity(count);
    for _ in 0..count {
        coords.push((f64_at(cursor), f64_at(cursor + 8), f64_at(cursor + 16)));
        cursor += 24;
    }
    let mut points = Vec::with_capacity(count);
    if has_remission {
        for &(x, y, z) in &coords {
            points.push(
                Point3::with_remission(x, y, z, f64_at(cursor))
                    .map_err(|e| format_err(path, e.to_string()))?,
            );
            cursor += 8;
        }
    } else {
        for &(x, y, z) in &coords {
            points.push(Point3::new(x, y, z).map_err(|e| format_err(path, e.to_string()))?);
        }
    }
    let mut sem = Vec::with_capacity(count);
    for _ in 0..count {
        sem.push(u32_at(cursor));
        cursor += 4;
    }
    let mut inst = Vec::with_capacity(count);
    for _ in 0..count {
        inst.push(u32_at(cursor));
        cursor += 4;
    }
    Scene::new(points, sem, inst, taxonomy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, micro_taxonomy, toy_synth_config};
    use proptest::prelude::*;

    #[test]
    fn label_word_bit_layout() {
        assert_eq!(unpack_label(0x0001_0009), (9, 1));
        assert_eq!(unpack_label(0), (0, 0));
        assert_eq!(pack_label(9, 1).unwrap(), 0x0001_0009);
        assert_eq!(pack_label(0xFFFF, 0xFFFF).unwrap(), 0xFFFF_FFFF);
    }

    #[test]
    fn pack_rejects_wide_ids() {
        assert!(pack_label(0x1_0000, 0).is_err());
        assert!(pack_label(0, 0x1_0000).is_err());
    }

    #[test]
    fn velodyne_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.bin");

        std::fs::write(&path, vec![0u8; 32]).unwrap();
        assert_eq!(read_velodyne_bin(&path).unwrap().len(), 2);

        std::fs::write(&path, Vec::<u8>::new()).unwrap();
        assert!(read_velodyne_bin(&path).unwrap().is_empty());

        std::fs::write(&path, vec![0u8; 35]).unwrap();
        let err = read_velodyne_bin(&path).unwrap_err();
        assert!(err.to_string().contains("byte offset 32"), "{err}");
    }

    #[test]
    fn velodyne_rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.bin");
        let mut bytes = Vec::new();
        for v in [f32::NAN, 0.0, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        assert!(read_velodyne_bin(&path).is_err());
    }

    #[test]
    fn truncated_label_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.label");
        std::fs::write(&path, vec![0u8; 6]).unwrap();
        let err = read_labels(&path).unwrap_err();
        assert!(err.to_string().contains("byte offset 4"), "{err}");
    }

    #[test]
    fn scene_container_round_trips() {
        let tax = micro_taxonomy();
        let scene = generate(&toy_synth_config(11), &tax, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.pcscene");
        write_scene(&path, &scene).unwrap();
        let back = read_scene(&path, &tax).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn scene_container_rejects_garbage() {
        let tax = micro_taxonomy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.pcscene");
        std::fs::write(&path, b"NOTASCENE").unwrap();
        assert!(read_scene(&path, &tax).is_err());
    }

    #[test]
    fn remap_applies_table() {
        let remap = ClassRemap::new([(40, 1), (44, 1), (10, 3)].into());
        let mut sem = vec![40, 44, 10, 7];
        remap.apply(&mut sem);
        assert_eq!(sem, vec![1, 1, 3, 7]);
    }

    proptest! {
        /// Velodyne write→read is the identity on f32-valued finite points.
        #[test]
        fn velodyne_round_trip(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(0usize..40);
            let points: Vec<Point3> = (0..n)
                .map(|_| {
                    Point3::with_remission(
                        rng.gen_range(-80.0f32..80.0) as f64,
                        rng.gen_range(-80.0f32..80.0) as f64,
                        rng.gen_range(-4.0f32..4.0) as f64,
                        rng.gen_range(0.0f32..1.0) as f64,
                    )
                    .unwrap()
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("scan.bin");
            write_velodyne_bin(&path, &points).unwrap();
            let back = read_velodyne_bin(&path).unwrap();
            prop_assert_eq!(points, back);
        }

        /// Label write→read is the identity for 16-bit ids.
        #[test]
        fn label_round_trip(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(0usize..60);
            let sem: Vec<u32> = (0..n).map(|_| rng.gen_range(0u32..0x10000)).collect();
            let inst: Vec<u32> = (0..n).map(|_| rng.gen_range(0u32..0x10000)).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("labels.label");
            write_labels(&path, &sem, &inst).unwrap();
            let (sem_back, inst_back) = read_labels(&path).unwrap();
            prop_assert_eq!(sem, sem_back);
            prop_assert_eq!(inst, inst_back);
        }
    }
}
