//! Compiles every guide chapter's code blocks as doc-tests, so the book
//! under `book/` cannot drift from the library it documents.

macro_rules! chapter {
    ($carrier:ident, $path:literal) => {
        #[doc = include_str!($path)]
        pub struct $carrier;
    };
}

chapter!(Introduction, "../../../book/src/introduction.md");
chapter!(TapeChapter, "../../../book/src/tape.md");
chapter!(DataChapter, "../../../book/src/data.md");
chapter!(BackboneChapter, "../../../book/src/backbone.md");
chapter!(GuidanceChapter, "../../../book/src/guidance.md");
chapter!(MappingChapter, "../../../book/src/mapping.md");
chapter!(TrainingChapter, "../../../book/src/training.md");
chapter!(EvidenceChapter, "../../../book/src/evidence.md");
chapter!(CliChapter, "../../../book/src/cli.md");
