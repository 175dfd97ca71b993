#![allow(dead_code)]

use std::sync::OnceLock;

use fastrec::classifiers::SvmParams;
use fastrec::dataset::synthetic::SyntheticShapes;
use fastrec::dataset::ImageRecord;
use fastrec::features::DictionaryParams;
use fastrec::harness::{train_artifacts, Artifacts, TrainParams};
use fastrec::memory::{H1Mode, LowPass, MemoryParams, StoreOptions};

pub const TINY_TRAIN: usize = 300;
pub const TINY_TEST: usize = 60;

pub fn tiny_params(seed: u64) -> TrainParams {
    TrainParams {
        dictionary: DictionaryParams::new(16, 6, 10, seed),
        store: StoreOptions {
            lowpass: LowPass::Box3,
            h1: H1Mode::Memory,
        },
        memory: MemoryParams::new(3, seed),
        svm: SvmParams {
            epochs: 5,
            seed,
            ..SvmParams::default()
        },
        augment_levels: Vec::new(),
    }
}

pub fn tiny_images(seed: u64) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    let gen = SyntheticShapes::new(seed);
    (
        gen.generate(TINY_TRAIN),
        gen.test_split().generate(TINY_TEST),
    )
}

pub struct Tiny {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub artifacts: Artifacts,
}

/// Small trained pipeline shared by the tests of one binary.
pub fn tiny() -> &'static Tiny {
    static CELL: OnceLock<Tiny> = OnceLock::new();
    CELL.get_or_init(|| {
        let (train, test) = tiny_images(5);
        let artifacts = train_artifacts(&train, &tiny_params(5)).expect("tiny pipeline trains");
        Tiny {
            train,
            test,
            artifacts,
        }
    })
}
