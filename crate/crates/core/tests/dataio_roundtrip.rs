use duvio_core::dataio::{build_windows, export_windows, load_sequence, read_exported_windows, save_sequence};
use duvio_core::disturb::{disturb_sequence, synthesize_sequence, SyntheticSpec, Trajectory};
use duvio_core::dataio::Scenario;

#[test]
fn synthetic_sequence_survives_save_and_load() {
    let spec = SyntheticSpec {
        trajectory: Trajectory::Circle { center: [0.0, 0.0, 2.0], radius: 1.0, angular_rate: 0.4 },
        duration: 1.5,
        width: 24,
        height: 12,
        gyro_noise: 0.01,
        accel_noise: 0.05,
        timing_jitter: 0.1,
        reference_stride: 3,
        ..SyntheticSpec::default()
    };
    let ds = synthesize_sequence(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_sequence(&ds, dir.path()).unwrap();
    let back = load_sequence(dir.path()).unwrap();
    assert_eq!(back, ds);

    let turbid = disturb_sequence(&ds, Scenario::Turbid, &Default::default(), &Default::default());
    save_sequence(&turbid, &dir.path().join("t")).unwrap();
    assert_eq!(load_sequence(&dir.path().join("t")).unwrap(), turbid);
}

#[test]
fn exported_windows_match_build() {
    let ds = synthesize_sequence(&SyntheticSpec { duration: 0.5, width: 8, height: 4, ..SyntheticSpec::default() }).unwrap();
    let w = build_windows(&ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_windows(&w, dir.path()).unwrap();
    let (index, records) = read_exported_windows(dir.path()).unwrap();
    assert_eq!(index.count, w.len());
    for (rec, win) in records.iter().zip(&w) {
        assert_eq!(rec[0], win.frame_a.timestamp);
        assert_eq!(&rec[rec.len() - 6..], &win.target.to_array());
    }
}
