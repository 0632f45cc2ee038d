use std::fs;
use std::path::{Path, PathBuf};

use kpp_core::data::{binarize, load_idx, parse_idx_images, synth_shapes, BinarizeMode, Dataset, Split};

use crate::args::{BinarizeArg, DataArgs};
use crate::CliError;

const TEST_SEED_OFFSET: u64 = 0x5eed_0000_0001;
const TRAIN_FILES: [&str; 2] = ["train-images-idx3-ubyte", "train-images.idx3-ubyte"];
const TEST_FILES: [&str; 2] = ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"];

fn find(dir: &Path, names: &[&str]) -> Result<PathBuf, CliError> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            CliError::io(
                dir,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("none of {names:?} found"),
                ),
            )
        })
}

/// Image shape implied by `--data`: synthetic images use `fallback`, IDX data its header.
pub fn image_shape(data: &DataArgs, fallback: [usize; 3]) -> Result<[usize; 3], CliError> {
    if data.data == "synth" {
        return Ok(fallback);
    }
    let path = Path::new(&data.data);
    let file = if path.is_dir() { find(path, &TRAIN_FILES)? } else { path.to_path_buf() };
    let bytes = fs::read(&file).map_err(|e| CliError::io(&file, e))?;
    let images = parse_idx_images(&bytes)?;
    let shape = images.shape();
    Ok([shape[1], shape[2], shape[3]])
}

fn finish(ds: Dataset, n: usize, split: Split, args: &DataArgs, salt: u64) -> Dataset {
    let mut ds = ds.take(n);
    ds.split = split;
    match args.binarize {
        BinarizeArg::None => ds,
        BinarizeArg::Threshold => binarize(&ds, BinarizeMode::Threshold, 0),
        BinarizeArg::Stochastic => binarize(&ds, BinarizeMode::Stochastic, args.data_seed ^ salt),
    }
}

/// Train and test splits for `--data`. `image_size` sets the side of synthetic images.
///
/// A directory must hold MNIST-style train and test IDX image files. A single
/// file is split: its last `n_test` images form the test set.
pub fn load_data(args: &DataArgs, image_size: usize) -> Result<(Dataset, Dataset), CliError> {
    if args.data == "synth" {
        let train = synth_shapes(args.n_train, image_size, image_size, args.data_seed)?;
        let mut test = synth_shapes(args.n_test, image_size, image_size, args.data_seed ^ TEST_SEED_OFFSET)?;
        test.split = Split::Test;
        return Ok((train, test));
    }
    let path = Path::new(&args.data);
    if path.is_dir() {
        let train = load_idx(find(path, &TRAIN_FILES)?)?;
        let test = load_idx(find(path, &TEST_FILES)?)?;
        return Ok((
            finish(train, args.n_train, Split::Train, args, 0),
            finish(test, args.n_test, Split::Test, args, TEST_SEED_OFFSET),
        ));
    }
    let all = load_idx(path)?;
    if all.len() <= args.n_test {
        return Err(CliError::Usage(format!(
            "{} holds {} images, not enough for {} test images plus training data",
            path.display(),
            all.len(),
            args.n_test
        )));
    }
    let split_at = all.len() - args.n_test;
    let images = all.images();
    let s = images.shape();
    let train = Dataset::new(images.rows(0, split_at), Split::Train, all.name.clone())?;
    let test = Dataset::new(images.rows(split_at, s[0]), Split::Test, all.name.clone())?;
    Ok((
        finish(train, args.n_train, Split::Train, args, 0),
        finish(test, args.n_test, Split::Test, args, TEST_SEED_OFFSET),
    ))
}
