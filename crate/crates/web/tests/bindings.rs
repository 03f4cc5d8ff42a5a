use sent2matrix_web::{fold_grid, normalize_text, word_layouts, EncodedSentence};

#[test]
fn fold_grid_matches_the_folded_reading() {
    assert_eq!(fold_grid("The cat sat.", 3), "the\ntac\ncat\ntas");
    assert_eq!(fold_grid("", 3), "");
}

#[test]
fn layouts_show_both_paddings() {
    assert_eq!(word_layouts("cat i", 5), ".cat.   catCA\n..i..   iIIII");
    assert_eq!(normalize_text("Hi, there!"), "hi there");
}

#[test]
fn encoded_sentence_cells() {
    let e = EncodedSentence::new("the cat sat", 3, 3, "serpentine", false).unwrap();
    assert_eq!((e.slices(), e.width(), e.channels()), (4, 3, 26));
    assert_eq!(e.slice_text(1), "tac");
    assert_eq!(e.letter(1, 0), 19);
    assert_eq!(e.position(1, 0), -1);
    assert_eq!(e.non_zero(), 12);

    let z = EncodedSentence::new("hi", 2, 4, "zero", true).unwrap();
    assert_eq!(z.channels(), 30);
    assert_eq!(z.slice_text(0), "hi");
    assert_eq!(z.letter(0, 0), -1);
    assert_eq!(z.letter(0, 1), 7);
    assert_eq!(z.position(0, 1), 1);
    assert_eq!(z.non_zero(), 4);
    assert_eq!(z.slice_text(1), "");
}
