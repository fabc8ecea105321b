use cinefix::corrupt::{corrupt_sequence, sample_plan};
use cinefix::detect::{duplicate_line_oracle, threshold_mask, LineProb};
use cinefix::io::{CktTensor, DType};
use cinefix::metrics::{psnr, quality};
use cinefix::phantom::{
    build_dataset, generate_subjects, load_dataset, DatasetSpec, PhantomRanges, Split,
};
use cinefix::recon::ReconConfig;
use cinefix::rng;
use cinefix::train::Model;
use cinefix::{Error, LineMask};

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        train: 3,
        val: 1,
        test: 2,
        frames: 10,
        height: 32,
        width: 32,
        canvas: None,
        ranges: PhantomRanges::for_size(32),
        seed,
    }
}

#[test]
fn dataset_on_disk_matches_memory() {
    let spec = small_spec(4);
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(&spec, dir.path()).unwrap();
    assert_eq!(manifest.subjects.len(), 6);
    let (back, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(back, manifest);
    let memory = generate_subjects(&spec).unwrap();
    for (a, b) in loaded.iter().zip(&memory) {
        assert_eq!(a.clean, b.clean);
        assert_eq!(a.split, b.split);
    }
    assert_eq!(loaded.iter().filter(|s| s.split == Split::Test).count(), 2);
}

#[test]
fn oracle_finds_copied_lines_on_phantoms() {
    let subjects = generate_subjects(&small_spec(8)).unwrap();
    let (mut hit, mut truth, mut flagged) = (0, 0, 0);
    for (i, s) in subjects.iter().enumerate() {
        let (t, h, _) = s.clean.dims();
        let mut r = rng::stream(12, &[i as u64]);
        let c = corrupt_sequence(&s.clean, &sample_plan(t, h, 4, None, &mut r).unwrap()).unwrap();
        let m = duplicate_line_oracle(&c.kspace, 1e-9).unwrap();
        for (&p, &y) in m.flags().iter().zip(c.mask.flags()) {
            hit += usize::from(p == 0 && y == 0);
            truth += usize::from(y == 0);
            flagged += usize::from(p == 0);
        }
        let clean_ks = cinefix::fourier::to_kspace(&s.clean).unwrap();
        assert_eq!(
            duplicate_line_oracle(&clean_ks, 1e-9).unwrap(),
            LineMask::ones(t, h)
        );
    }
    let (recall, precision) = (hit as f64 / truth as f64, hit as f64 / flagged as f64);
    assert!(
        recall >= 0.97 && precision >= 0.97,
        "recall {recall} precision {precision}"
    );
}

#[test]
fn fresh_network_starts_as_the_identity() {
    // The last layer of each denoiser starts at zero, so an untrained network
    // under hard DC returns its measured input unchanged.
    let subjects = generate_subjects(&small_spec(9)).unwrap();
    let s = &subjects[0];
    let (t, h, w) = s.clean.dims();
    let mut r = rng::stream(1, &[]);
    let c = corrupt_sequence(&s.clean, &sample_plan(t, h, 8, None, &mut r).unwrap()).unwrap();
    let model = Model::new(
        cinefix::detect::DetectConfig::desk(t, h, w),
        ReconConfig::desk(t, h, w),
        3,
    )
    .unwrap();
    let fixed = model.reconstruct(&c.kspace, &c.mask).unwrap();
    let before = psnr(&c.image, &s.clean, 1.0).unwrap();
    let after = psnr(&fixed, &s.clean, 1.0).unwrap();
    assert!((after - before).abs() < 1e-9, "{after} vs {before}");
    let q = quality(&fixed, &s.clean).unwrap();
    assert!(q.ssim > 0.0 && q.ssim <= 1.0);

    let trust_all = LineProb::new(t, h, vec![0.9; t * h]).unwrap();
    let clean_ks = cinefix::fourier::to_kspace(&s.clean).unwrap();
    let exact = model
        .reconstruct(&clean_ks, &threshold_mask(&trust_all, 0.5).unwrap())
        .unwrap();
    assert!(psnr(&exact, &s.clean, 1.0).unwrap() > 200.0);
}

#[test]
fn truncated_container_reports_offset() {
    let seq = generate_subjects(&small_spec(2)).unwrap().remove(0).clean;
    let bytes = CktTensor::from(&seq).encode();
    assert_eq!(&bytes[..4], b"CKT1");
    assert_eq!(bytes[5], DType::Real as u8);
    let cut = &bytes[..bytes.len() - 3];
    match CktTensor::decode(cut) {
        Err(Error::Parse { field, offset, .. }) => {
            assert_eq!(field, "payload");
            assert!(offset > 0 && offset <= cut.len() as u64);
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}
