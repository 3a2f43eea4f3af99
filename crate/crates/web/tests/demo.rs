use sparse_rnnt_web::{cell, cer_data, doi_layout_data, mask_grid_data};

#[test]
fn grid_codes_follow_the_policy() {
    let dense = mask_grid_data(12, 2, 2, "dense", 1).unwrap();
    assert!(dense.heads.iter().all(|h| h.density == 1.0));
    assert!(dense.heads[0].cells.iter().all(|&c| c == cell::LOCAL));

    let local = mask_grid_data(12, 2, 1, "local", 1).unwrap();
    for i in 0..12usize {
        for j in 0..12 {
            let want = if i.abs_diff(j) <= 2 { cell::LOCAL } else { cell::HIDDEN };
            assert_eq!(local.heads[0].cells[i * 12 + j], want);
        }
    }

    let sgm = mask_grid_data(40, 3, 4, "local+sgm1", 7).unwrap();
    let cells = &sgm.heads[0].cells;
    assert!(cells.contains(&cell::GLOBAL) && cells.contains(&cell::BOTH));
    // union fusion gives every head the same global set
    assert!(sgm.heads.iter().all(|h| &h.cells == cells));
    assert_eq!(sgm.policy, "local+sgm1");
}

#[test]
fn intersection_is_never_denser_than_union() {
    for seed in 0..10 {
        let or = mask_grid_data(30, 2, 4, "local+sgm1", seed).unwrap();
        let per = mask_grid_data(30, 2, 4, "local+sgm2", seed).unwrap();
        let and = mask_grid_data(30, 2, 4, "local+sgm3", seed).unwrap();
        for h in 0..4 {
            assert!(and.heads[h].density <= per.heads[h].density);
            assert!(per.heads[h].density <= or.heads[h].density);
        }
    }
}

#[test]
fn grid_rejects_bad_input() {
    assert!(mask_grid_data(0, 2, 1, "local", 0).is_err());
    assert!(mask_grid_data(300, 2, 1, "local", 0).is_err());
    assert!(mask_grid_data(10, 2, 0, "local", 0).is_err());
    assert!(mask_grid_data(10, 2, 1, "sgm3", 0).is_err());
}

#[test]
fn layout_and_cer() {
    let segs = doi_layout_data(50.0, 20.0, 2.0).unwrap();
    assert_eq!(segs.len(), 3);
    assert_eq!(segs[1].core_start, segs[0].core_end);
    assert!(doi_layout_data(50.0, 4.0, 2.0).is_err());

    let b = cer_data("abcd", "abd", false);
    assert_eq!((b.deletions, b.insertions, b.substitutions), (1, 0, 0));
    assert_eq!(cer_data("a b", "ab", true).errors(), 0);
}
