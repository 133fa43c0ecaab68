use tptn_core::features::{detect_contacts, ContactThresholds};
use tptn_core::rot::Vec3;
use tptn_core::synthetic::{generate_gait, generate_segments, GaitSpec};

#[test]
fn walk_has_alternating_stance() {
    let clip = generate_gait(&GaitSpec::walk(100.0), 240, 60.0, Vec3::zeros(), 0.0);
    let feet = clip.skeleton.feet.unwrap();
    let contacts = detect_contacts(&clip, &ContactThresholds::default()).unwrap();
    let lf: f64 = contacts.iter().map(|c| c[0]).sum::<f64>() / contacts.len() as f64;
    let rf: f64 = contacts.iter().map(|c| c[2]).sum::<f64>() / contacts.len() as f64;
    assert!((0.4..0.75).contains(&lf), "left stance share {lf}");
    assert!((0.4..0.75).contains(&rf), "right stance share {rf}");
    // Mid-stance of the left foot at 0.3 of the first cycle; right is in swing.
    let n = (0.3 * 0.9 * 60.0) as usize + 54;
    assert_eq!(contacts[n][0], 1.0, "{:?}", contacts[n]);
    assert_eq!(contacts[n][2], 0.0, "{:?}", contacts[n]);
    let p = clip.positions(n);
    assert!(p[feet.left_foot].y < 10.0);
    assert!(p[feet.right_foot].y > p[feet.left_foot].y);
    // Root advanced at the commanded speed.
    let last = clip.frames.last().unwrap().root_position;
    assert!((last.z - 239.0 * 100.0 / 60.0).abs() < 1e-6);
}

#[test]
fn planted_foot_does_not_slide() {
    let clip = generate_gait(&GaitSpec::walk(120.0), 180, 60.0, Vec3::zeros(), 0.3);
    let contacts = detect_contacts(&clip, &ContactThresholds::default()).unwrap();
    let lf = clip.skeleton.feet.unwrap().left_foot;
    let mut slide = Vec::new();
    for n in 1..clip.len() {
        if contacts[n][0] == 1.0 && contacts[n - 1][0] == 1.0 {
            let d = clip.positions(n)[lf] - clip.positions(n - 1)[lf];
            slide.push(d.x.hypot(d.z));
        }
    }
    let still = slide.iter().filter(|&&s| s < 1e-6).count();
    // Only the lift-off frames, where the heel starts to move, may slide.
    assert!(still as f64 > 0.8 * slide.len() as f64, "{slide:?}");
}

#[test]
fn idle_keeps_both_feet_down() {
    let clip = generate_gait(&GaitSpec::idle(), 120, 60.0, Vec3::zeros(), 0.0);
    let contacts = detect_contacts(&clip, &ContactThresholds::default()).unwrap();
    assert!(contacts.iter().all(|c| c[0] == 1.0 && c[2] == 1.0));
}

#[test]
fn segments_are_continuous() {
    let mut turn = GaitSpec::walk(100.0);
    turn.turn_rate = 0.8;
    let (clip, types) = generate_segments(
        &[
            (GaitSpec::walk(100.0), 100, 0),
            (turn, 100, 1),
            (GaitSpec::idle(), 50, 2),
        ],
        3,
        60.0,
    );
    assert_eq!(clip.len(), 250);
    assert_eq!(types[99], vec![1.0, 0.0, 0.0]);
    assert_eq!(types[100], vec![0.0, 1.0, 0.0]);
    for n in 1..clip.len() {
        let d = clip.frames[n].root_position - clip.frames[n - 1].root_position;
        assert!(d.x.hypot(d.z) < 2.5, "jump at {n}: {d:?}");
    }
}
