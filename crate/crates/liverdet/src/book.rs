//! Keeps the book's code snippets compiling: every chapter is included as
//! a doc comment here, so `cargo test --doc` runs each ```rust block.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(getting_started, "getting-started.md");
chapter!(volumes_and_labels, "volumes-and-labels.md");
chapter!(file_formats, "file-formats.md");
chapter!(sensitivity, "sensitivity.md");
chapter!(lesion_instances, "lesion-instances.md");
chapter!(matching, "matching.md");
chapter!(lesion_shuffle, "lesion-shuffle.md");
chapter!(reclassification, "reclassification.md");
chapter!(evaluation, "evaluation.md");
chapter!(phantoms, "phantoms.md");
chapter!(pipeline_and_cli, "pipeline-and-cli.md");
