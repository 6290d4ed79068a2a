mod common;

use cylindertag::assembler::{
    decode, extract_codes, organize_markers, pair_quads, parse_detections, try_pair, DecodeError, FeatureSubregion,
    OrganizeCriteria, PairingCriteria,
};
use cylindertag::codec::{CrCategories, Direction};
use cylindertag::geometry::{Line2, Vec2, Vec3};
use cylindertag::quadfit::QuadCandidate;
use cylindertag::synth::{render_scene, scene_pose, GroundTruth, SceneConfig};
use cylindertag::Dictionary;
use proptest::prelude::*;

fn quad(corners: [Vec2; 4], region: usize) -> QuadCandidate {
    let lines = std::array::from_fn(|i| Line2::through(corners[i], corners[(i + 1) % 4]));
    QuadCandidate {
        corners,
        lines,
        region,
        rac: 0.0,
    }
}

/// Ground truth of one rendered view (no pixels needed).
fn view(dict: &Dictionary, id: u32, yaw: f64, pitch: f64, roll: f64, dist: f64) -> GroundTruth {
    let layout = common::layout_of(dict, id);
    let pose = scene_pose(yaw, pitch, roll, Vec3::new(0.0, 0.0, dist), layout.height);
    let mut cfg = SceneConfig::new(layout.radius, pose);
    // visibility needs the full frame; one sample per pixel keeps it cheap
    cfg.supersample = 1;
    let (_, gt) = render_scene(&layout, &cfg).unwrap();
    gt
}

/// Exact quads of every fully visible column, with their column index.
fn truth_quads(gt: &GroundTruth) -> (Vec<QuadCandidate>, Vec<usize>) {
    let mut quads = Vec::new();
    let mut cols = Vec::new();
    for (c, col) in gt.corners.iter().enumerate() {
        if col.iter().all(|k| k.visible) {
            let p: Vec<Vec2> = col.iter().map(|k| k.pos).collect();
            quads.push(quad([p[0], p[1], p[2], p[3]], quads.len()));
            quads.push(quad([p[4], p[5], p[6], p[7]], quads.len()));
            cols.push(c);
        }
    }
    (quads, cols)
}

fn rotate_about(q: &QuadCandidate, deg: f64) -> QuadCandidate {
    let c: Vec2 = q.corners.iter().sum::<Vec2>() / 4.0;
    let (s, co) = deg.to_radians().sin_cos();
    let r = |p: Vec2| {
        let d = p - c;
        c + Vec2::new(co * d.x - s * d.y, s * d.x + co * d.y)
    };
    quad(q.corners.map(r), q.region)
}

fn shifted(q: &QuadCandidate, by: Vec2) -> QuadCandidate {
    quad(q.corners.map(|p| p + by), q.region)
}

#[test]
fn rendered_subregions_pair_with_their_own_quads() {
    let dict = common::dictionary_12c2f();
    let gt = view(&dict, 7, 20.0, 15.0, 30.0, 450.0);
    let (quads, cols) = truth_quads(&gt);
    assert!(cols.len() >= 3);
    let subs = pair_quads(&quads, &PairingCriteria::default());
    assert_eq!(subs.len(), cols.len());
    for s in &subs {
        let (a, b) = (s.quads[0].region, s.quads[1].region);
        assert_eq!(a / 2, b / 2, "quads {a} and {b} come from different columns");
    }
}

#[test]
fn rotated_long_edge_is_not_paired() {
    let dict = common::dictionary_12c2f();
    let gt = view(&dict, 0, 0.0, 0.0, 0.0, 400.0);
    let (quads, _) = truth_quads(&gt);
    let pc = PairingCriteria::default();
    assert!(try_pair(&quads[0], &quads[1], &pc).is_some());
    assert!(try_pair(&quads[0], &rotate_about(&quads[1], 10.0), &pc).is_none());
}

#[test]
fn lateral_gap_is_not_paired() {
    let dict = common::dictionary_12c2f();
    let gt = view(&dict, 0, 0.0, 0.0, 0.0, 400.0);
    let (quads, _) = truth_quads(&gt);
    let pc = PairingCriteria::default();
    let s = try_pair(&quads[0], &quads[1], &pc).unwrap();
    let side = Vec2::new(-s.axis.y, s.axis.x);
    let moved = shifted(&quads[1], side * 0.2 * s.sigma_l);
    assert!(try_pair(&quads[0], &moved, &pc).is_none());
}

#[test]
fn neighbouring_columns_do_not_cross_pair() {
    let dict = common::dictionary_12c2f();
    let gt = view(&dict, 4, 0.0, 0.0, 0.0, 400.0);
    let (quads, _) = truth_quads(&gt);
    let pc = PairingCriteria::default();
    // first quad of column k with either quad of column k+1
    for k in 0..quads.len() / 2 - 1 {
        for other in [2 * k + 2, 2 * k + 3] {
            assert!(try_pair(&quads[2 * k], &quads[other], &pc).is_none());
        }
    }
}

#[test]
fn quad_with_two_partners_is_dropped() {
    let dict = common::dictionary_12c2f();
    let gt = view(&dict, 2, 0.0, 0.0, 0.0, 400.0);
    let (quads, _) = truth_quads(&gt);
    let mut set = vec![quads[0].clone(), quads[1].clone()];
    let mut twin = quads[1].clone();
    twin.region = 99;
    set.push(twin);
    assert!(pair_quads(&set, &PairingCriteria::default()).is_empty());
}

fn subregions(
    dict: &Dictionary,
    id: u32,
    yaw: f64,
    pitch: f64,
    roll: f64,
    dist: f64,
) -> (Vec<FeatureSubregion>, Vec<usize>) {
    let gt = view(dict, id, yaw, pitch, roll, dist);
    let (quads, cols) = truth_quads(&gt);
    let mut subs = pair_quads(&quads, &PairingCriteria::default());
    subs.sort_by_key(|s| s.quads[0].region.min(s.quads[1].region));
    (subs, cols)
}

#[test]
fn visible_columns_form_one_cluster() {
    let dict = common::dictionary_12c2f();
    let (subs, cols) = subregions(&dict, 5, 0.0, 0.0, 0.0, 300.0);
    assert!(cols.len() >= 4);
    let clusters = organize_markers(&subs, &OrganizeCriteria::default());
    assert_eq!(clusters.len(), 1);
    assert_eq!(clusters[0].len(), cols.len());
}

#[test]
fn oblique_neighbour_is_a_separate_cluster() {
    let dict = common::dictionary_12c2f();
    let gt = view(&dict, 5, 0.0, 0.0, 0.0, 400.0);
    let (quads, _) = truth_quads(&gt);
    let pc = PairingCriteria::default();
    let s = try_pair(&quads[0], &quads[1], &pc).unwrap();
    let side = Vec2::new(-s.axis.y, s.axis.x);
    // centre connection at |l̂·ĉ| = 0.8, one width away
    let d = (s.axis * 0.8 + side * 0.6) * s.width * 1.5;
    let set = vec![
        quads[0].clone(),
        quads[1].clone(),
        shifted(&quads[0], d),
        shifted(&quads[1], d),
    ];
    let subs = pair_quads(&set, &pc);
    assert_eq!(subs.len(), 2);
    assert_eq!(organize_markers(&subs, &OrganizeCriteria::default()).len(), 2);
}

#[test]
fn isolated_subregion_is_a_singleton() {
    let dict = common::dictionary_12c2f();
    let (subs, _) = subregions(&dict, 1, 0.0, 0.0, 0.0, 400.0);
    let one = vec![subs[0].clone()];
    assert_eq!(organize_markers(&one, &OrganizeCriteria::default()), vec![vec![0]]);
}

#[test]
fn noiseless_codes_match_the_marker_window() {
    let dict = common::dictionary_12c2f();
    for id in [0, 7, 13] {
        let (subs, cols) = subregions(&dict, id, 0.0, 10.0, 0.0, 350.0);
        let clusters = organize_markers(&subs, &OrganizeCriteria::default());
        let runs = extract_codes(
            &subs,
            &clusters[0],
            &OrganizeCriteria::default(),
            &CrCategories::default(),
        );
        assert_eq!(runs.len(), 1);
        let seq = &dict.marker(id).unwrap().codes;
        let n = seq.len();
        // visible columns wrap through 0: order them as seen
        let mut want: Vec<usize> = cols.clone();
        if want.contains(&0) && want.contains(&(n - 1)) {
            want.sort_by_key(|&c| (c + n / 2) % n);
        }
        let observed: Vec<_> = runs[0].iter().map(|r| r.code).collect();
        let expected: Vec<_> = want.iter().map(|&c| seq[c]).collect();
        assert_eq!(observed, expected, "marker {id}");
    }
}

#[test]
fn missing_column_splits_the_run() {
    let dict = common::dictionary_12c2f();
    let (mut subs, cols) = subregions(&dict, 3, 0.0, 0.0, 0.0, 300.0);
    assert!(cols.len() >= 4);
    // drop a column from the middle of the image
    subs.sort_by(|a, b| a.center.x.total_cmp(&b.center.x));
    subs.remove(subs.len() / 2);
    let clusters = organize_markers(&subs, &OrganizeCriteria::default());
    assert_eq!(clusters.len(), 1);
    let runs = extract_codes(
        &subs,
        &clusters[0],
        &OrganizeCriteria::default(),
        &CrCategories::default(),
    );
    assert_eq!(runs.len(), 2);
}

fn decode_view(
    dict: &Dictionary,
    id: u32,
    roll: f64,
) -> Result<(cylindertag::assembler::MarkerDetection, Vec<usize>), DecodeError> {
    let (subs, cols) = subregions(dict, id, 10.0, 5.0, roll, 400.0);
    let oc = OrganizeCriteria::default();
    let clusters = organize_markers(&subs, &oc);
    let runs = extract_codes(&subs, &clusters[0], &oc, &CrCategories::default());
    decode(&runs, dict).map(|d| (d, cols))
}

#[test]
fn noiseless_view_decodes_with_true_columns() {
    let dict = common::dictionary_12c2f();
    let (det, cols) = decode_view(&dict, 7, 0.0).unwrap();
    assert_eq!(det.id, 7);
    assert_eq!(det.direction, Direction::Forward);
    assert_eq!(det.coverage, 1.0);
    let mut got: Vec<usize> = det.columns.iter().map(|(c, _)| *c).collect();
    got.sort();
    let mut want = cols.clone();
    want.sort();
    assert_eq!(got, want);
}

#[test]
fn decoded_corners_are_the_true_corners() {
    let dict = common::dictionary_12c2f();
    let gt = view(&dict, 9, 10.0, 5.0, 0.0, 400.0);
    let (det, _) = decode_view(&dict, 9, 0.0).unwrap();
    for (c, corners) in &det.columns {
        for (k, p) in corners.iter().enumerate() {
            assert!((p - gt.corners[*c][k].pos).norm() < 1e-9, "column {c} corner {k}");
        }
    }
}

#[test]
fn upside_down_view_flips_direction() {
    let dict = common::dictionary_12c2f();
    for id in [2, 7, 11] {
        let up = decode_view(&dict, id, 0.0).unwrap().0;
        let down = decode_view(&dict, id, 180.0).unwrap().0;
        assert_eq!(up.id, id);
        assert_eq!(down.id, id);
        assert_ne!(up.direction, down.direction);
        // column indices and corner labels survive the half turn
        let gt = view(&dict, id, 10.0, 5.0, 180.0, 400.0);
        for (c, corners) in &down.columns {
            for (k, p) in corners.iter().enumerate() {
                assert!((p - gt.corners[*c][k].pos).norm() < 1e-9);
            }
        }
    }
}

#[test]
fn short_run_is_rejected() {
    let dict = common::dictionary_12c2f();
    let (subs, _) = subregions(&dict, 7, 0.0, 0.0, 0.0, 400.0);
    let oc = OrganizeCriteria::default();
    let clusters = organize_markers(&subs, &oc);
    let mut runs = extract_codes(&subs, &clusters[0], &oc, &CrCategories::default());
    let f = dict.config().field;
    runs[0].truncate(f - 1);
    assert_eq!(decode(&runs, &dict), Err(DecodeError::TooShort));
}

#[test]
fn detections_text_round_trip() {
    let dict = common::dictionary_12c2f();
    let (det, _) = decode_view(&dict, 4, 0.0).unwrap();
    let text = format!("# one marker\n{}", det.to_text());
    let back = parse_detections(&text).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].to_text(), det.to_text());
    assert!(parse_detections("4 forward 1.0\n0 3 1.0\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pairing_is_symmetric(yaw in -60.0f64..60.0, pitch in -45.0f64..45.0, roll in -180.0f64..180.0) {
        let dict = common::dictionary_12c2f();
        let gt = view(&dict, 6, yaw, pitch, roll, 450.0);
        let (quads, _) = truth_quads(&gt);
        let pc = PairingCriteria::default();
        for i in 0..quads.len() {
            for j in i + 1..quads.len() {
                prop_assert_eq!(try_pair(&quads[i], &quads[j], &pc).is_some(), try_pair(&quads[j], &quads[i], &pc).is_some());
            }
        }
    }

    #[test]
    fn clusters_partition_the_subregions(yaw in -60.0f64..60.0, pitch in -45.0f64..45.0, drop in 0usize..4) {
        let dict = common::dictionary_12c2f();
        let (mut subs, _) = subregions(&dict, 8, yaw, pitch, 0.0, 450.0);
        if drop < subs.len() {
            subs.remove(drop);
        }
        let clusters = organize_markers(&subs, &OrganizeCriteria::default());
        let mut seen: Vec<usize> = clusters.concat();
        seen.sort();
        prop_assert_eq!(seen, (0..subs.len()).collect::<Vec<_>>());
    }
}
