mod common;

use std::fs;

use energy_field::tensor_io::{read_dump_header, HEADER_LEN};
use energy_field::{
    load_manifest, read_head_dump, write_head_dump, Dtype, Error, HeadMeta, HeadTensors, Manifest, ManifestEntry,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn meta(layer: u32, query_head: u32, kv_head: u32) -> HeadMeta {
    HeadMeta {
        model_id: "test".into(),
        layer,
        query_head,
        kv_head,
        text_id: "t".into(),
    }
}

fn head(l: usize, d: usize, seed: u64) -> HeadTensors {
    let g = common::gaussian(l, d, seed);
    let (q, k, scale, _) = g.into_parts();
    HeadTensors::new(q, k, scale, meta(0, 0, 0)).unwrap()
}

#[test]
fn two_by_one_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.eft");
    let q = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
    let k = DMatrix::from_row_slice(2, 1, &[3.0, 4.0]);
    let h = HeadTensors::new(q.clone(), k.clone(), 1.0, meta(3, 5, 1)).unwrap();
    write_head_dump(&h, &path, Dtype::F64).unwrap();
    let back = read_head_dump(&path).unwrap();
    assert_eq!(back.q(), &q);
    assert_eq!(back.k(), &k);
    assert_eq!(back.softmax_scale(), 1.0);
    assert_eq!((back.meta.layer, back.meta.query_head, back.meta.kv_head), (3, 5, 1));
}

#[test]
fn file_size_follows_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.eft");
    write_head_dump(&head(256, 64, 1), &path, Dtype::F32).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len(), 64 + 2 * 256 * 64 * 4);
    assert_eq!(HEADER_LEN, 64);
}

#[test]
fn header_bytes_are_little_endian_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.eft");
    let q = DMatrix::from_row_slice(3, 2, &[1.0; 6]);
    let h = HeadTensors::new(q.clone(), q, 0.25, meta(7, 9, 4)).unwrap();
    write_head_dump(&h, &path, Dtype::F64).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[0..4], b"EFT1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(bytes[8], 2);
    assert_eq!(&bytes[9..12], &[0, 0, 0]);
    assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
    assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 2);
    assert_eq!(f64::from_le_bytes(bytes[28..36].try_into().unwrap()), 0.25);
    assert_eq!(u32::from_le_bytes(bytes[36..40].try_into().unwrap()), 7);
    assert_eq!(u32::from_le_bytes(bytes[40..44].try_into().unwrap()), 9);
    assert_eq!(u32::from_le_bytes(bytes[44..48].try_into().unwrap()), 4);
    assert!(bytes[48..64].iter().all(|&b| b == 0));
    assert_eq!(f64::from_le_bytes(bytes[64..72].try_into().unwrap()), 1.0);
    let header = read_dump_header(&path).unwrap();
    assert_eq!((header.len, header.head_dim), (3, 2));
}

#[test]
fn f32_dump_reads_back_rounded_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.eft");
    let h = head(17, 5, 4);
    write_head_dump(&h, &path, Dtype::F32).unwrap();
    let back = read_head_dump(&path).unwrap();
    for (a, b) in h
        .q()
        .iter()
        .chain(h.k().iter())
        .zip(back.q().iter().chain(back.k().iter()))
    {
        assert_eq!(*b, (*a as f32) as f64);
    }
}

#[test]
fn bad_magic_and_non_finite() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.eft");
    write_head_dump(&head(4, 2, 1), &path, Dtype::F64).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&path, &bytes).unwrap();
    let err = read_head_dump(&path).unwrap_err();
    assert!(err.to_string().contains("bad magic"), "{err}");

    let mut q = DMatrix::from_element(2, 2, 1.0);
    q[(1, 0)] = f64::NAN;
    let err = HeadTensors::new(q, DMatrix::from_element(2, 2, 1.0), 1.0, meta(0, 0, 0)).unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");
}

fn write_manifest(dir: &std::path::Path, layers: u32, heads: u32, kv_groups: u32) -> Manifest {
    let mut manifest = Manifest::new("text");
    for layer in 0..layers {
        for qh in 0..heads {
            let kv = qh * kv_groups / heads;
            let file = format!("l{layer}_h{qh}.eft");
            let (q, k, scale, _) = common::gaussian(6, 2, (layer * 100 + qh) as u64).into_parts();
            let h = HeadTensors::new(q, k, scale, meta(layer, qh, kv)).unwrap();
            write_head_dump(&h, dir.join(&file), Dtype::F32).unwrap();
            manifest.push(ManifestEntry {
                dump_path: file.into(),
                model_id: "tiny".into(),
                layer,
                query_head: qh,
                kv_head: kv,
                len: 6,
                d_h: 2,
                dtype: Dtype::F32,
            });
        }
    }
    manifest.save(dir.join("manifest.json")).unwrap();
    manifest
}

#[test]
fn twelve_by_twelve_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), 12, 12, 12);
    let m = load_manifest(dir.path().join("manifest.json")).unwrap();
    assert_eq!(m.heads.len(), 144);
    assert_eq!(m.gqa_map.len(), 12);
    assert!(m.gqa_map.values().all(|g| g.iter().all(|(q, kv)| q == kv)));
    let h = m.read_entry(&m.heads[37]).unwrap();
    assert_eq!((h.meta.layer, h.meta.query_head), (3, 1));
    assert_eq!(h.meta.model_id, "tiny");
}

#[test]
fn grouped_query_manifest_is_many_to_one() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), 1, 8, 2);
    let m = load_manifest(dir.path().join("manifest.json")).unwrap();
    let kvs: Vec<u32> = m.gqa_map[&0].values().copied().collect();
    assert_eq!(kvs, vec![0, 0, 0, 0, 1, 1, 1, 1]);
}

#[test]
fn dangling_path_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), 1, 2, 2);
    fs::remove_file(dir.path().join("l0_h1.eft")).unwrap();
    let err = load_manifest(dir.path().join("manifest.json")).unwrap_err();
    assert!(matches!(err, Error::MissingDumps(_)));
    assert!(err.to_string().contains("l0_h1.eft"), "{err}");
}

#[test]
fn declared_shape_must_match_header() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = write_manifest(dir.path(), 1, 1, 1);
    m.heads[0].len = 7;
    m.save(dir.path().join("manifest.json")).unwrap();
    let err = load_manifest(dir.path().join("manifest.json")).unwrap_err();
    assert!(err.to_string().contains("L: header 6 vs manifest 7"), "{err}");
}

#[test]
fn schema_violations() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    fs::write(
        &path,
        r#"{"version": 1, "text_id": "t", "heads": "nope", "gqa_map": {}}"#,
    )
    .unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Schema(_))));
    let mut m = write_manifest(dir.path(), 1, 2, 2);
    m.gqa_map.clear();
    m.save(&path).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(err.to_string().contains("gqa_map"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn round_trip_is_identity(l in 1usize..=512, d in 1usize..=128, seed in any::<u64>(), f32_dtype in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.eft");
        let h = head(l, d, seed);
        let dtype = if f32_dtype { Dtype::F32 } else { Dtype::F64 };
        write_head_dump(&h, &path, dtype).unwrap();
        let back = read_head_dump(&path).unwrap();
        let round = |x: f64| if f32_dtype { (x as f32) as f64 } else { x };
        prop_assert_eq!(back.q(), &h.q().map(round));
        prop_assert_eq!(back.k(), &h.k().map(round));
        prop_assert_eq!(back.softmax_scale(), h.softmax_scale());
    }

    #[test]
    fn truncation_is_detected(cut in 1usize..200) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.eft");
        write_head_dump(&head(8, 4, 2), &path, Dtype::F32).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - cut]).unwrap();
        prop_assert!(read_head_dump(&path).is_err());
    }
}
