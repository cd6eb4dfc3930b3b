import os

import numpy as np
import pytest

from rawres.audio import load_wav
from rawres.datasets import (ESC10_CLASS_IDS, ClipRef, DatasetError, DatasetSpec, load_dataset, load_esc10,
                             load_urbansound8k, make_split, parse_esc_name, read_metadata, synthetic_dataset)

US8K_FOLD_SIZES = (873, 888, 925, 990, 936, 823, 838, 806, 816, 837)


def _write_us8k_csv(path, fold_sizes=US8K_FOLD_SIZES):
    lines = ["slice_file_name,fsID,start,end,salience,fold,classID,class"]
    k = 0
    for fold, size in enumerate(fold_sizes, start=1):
        for _ in range(size):
            lines.append(f"{k}-0-0-0.wav,{k},0.0,4.0,1,{fold},{k % 10},c{k % 10}")
            k += 1
    path.write_text("\n".join(lines) + "\n")
    return path


def test_urbansound_split_sizes(tmp_path):
    spec = load_urbansound8k(_write_us8k_csv(tmp_path / "UrbanSound8K.csv"))
    assert len(spec.clips) == 8732 and not spec.deviations
    split = make_split(spec)
    assert (len(split.train), len(split.test)) == (7895, 837)
    assert split.validation == split.test
    assert not set(split.train) & set(split.test)


def test_urbansound_count_deviation_recorded(tmp_path, caplog):
    spec = load_urbansound8k(_write_us8k_csv(tmp_path / "m.csv", (3, 4)))
    assert spec.deviations and "8732" in spec.deviations[0]
    assert "8732" in caplog.text


def test_urbansound_paths(tmp_path):
    spec = load_urbansound8k(_write_us8k_csv(tmp_path / "m.csv", (1, 1)), root="/data/us8k")
    assert spec.path(spec.clips[1]) == os.path.join("/data/us8k", "audio", "fold2", spec.clips[1].file)


def test_strict_holdout(tmp_path):
    spec = load_urbansound8k(_write_us8k_csv(tmp_path / "m.csv"))
    split = make_split(spec, strict_holdout=True)
    assert (len(split.train), len(split.validation), len(split.test)) == (7895 - 816, 816, 837)


def test_metadata_missing_column(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("slice_file_name,classID\nx.wav,1\n")
    with pytest.raises(DatasetError, match="fold"):
        read_metadata(path)


def test_metadata_bad_row_names_line(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("slice_file_name,fold,classID\na.wav,1,2\nb.wav,x,3\n")
    with pytest.raises(DatasetError, match=":3:"):
        read_metadata(path)


def test_parse_esc_name():
    assert parse_esc_name("1-100032-A-0.wav") == (1, 0)
    assert parse_esc_name("/x/y/5-9032-B-41.wav") == (5, 41)
    with pytest.raises(DatasetError):
        parse_esc_name("dog.wav")


def _esc_names(per_class=8):
    names = []
    for cls in ESC10_CLASS_IDS:
        for j in range(per_class):
            names.append(f"{j % 5 + 1}-{1000 * cls + j}-A-{cls}.wav")
    return names


def test_esc10_remap_and_split():
    spec = load_esc10(_esc_names())
    assert sorted({c.label for c in spec.clips}) == list(range(10))
    assert len(spec.clips) == 80
    split = make_split(spec)
    assert (len(split.train), len(split.test)) == (70, 10)
    assert spec.deviations  # 8 per class instead of 40


def test_esc10_full_size_split():
    spec = load_esc10(_esc_names(per_class=40))
    assert not spec.deviations
    split = make_split(spec)
    assert (len(split.train), len(split.test)) == (320, 80)


def test_esc10_rejects_duplicates_and_strangers():
    names = _esc_names()
    with pytest.raises(DatasetError, match="duplicate"):
        load_esc10(names + names[:1])
    with pytest.raises(DatasetError, match="ESC-10"):
        load_esc10(names + ["1-5-A-13.wav"])


def test_split_needs_two_folds():
    spec = DatasetSpec("x", "", [ClipRef("a.wav", 0, 1)])
    with pytest.raises(DatasetError):
        make_split(spec)


def test_synthetic_counts_and_files(tmp_path):
    spec = synthetic_dataset(tmp_path, seed=3, n_classes=10, clips_per_class=2)
    assert len(spec.clips) == 20
    assert spec.folds == [1, 2, 3, 4, 5]
    assert np.bincount([c.label for c in spec.clips]).tolist() == [2] * 10
    clip = load_wav(spec.path(spec.clips[0]))
    assert clip.sample_rate == 8000 and clip.samples.size == 4000
    assert np.max(np.abs(clip.samples)) <= 1.0
    reloaded = load_dataset("synthetic", str(tmp_path), clip_seconds=0.5)
    assert reloaded.clips == spec.clips


def test_synthetic_deterministic(tmp_path):
    synthetic_dataset(tmp_path / "a", seed=11)
    synthetic_dataset(tmp_path / "b", seed=11)
    synthetic_dataset(tmp_path / "c", seed=12)
    names = sorted(os.listdir(tmp_path / "a"))
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "syn-00-0000.wav").read_bytes() != (tmp_path / "c" / "syn-00-0000.wav").read_bytes()


def test_synthetic_classes_separable(tmp_path):
    spec = synthetic_dataset(tmp_path, seed=0, n_classes=10, clips_per_class=10)
    split = make_split(spec)

    def feature(i):
        x = load_wav(spec.path(spec.clips[i])).samples
        mag = np.abs(np.fft.rfft(x))
        return mag / np.linalg.norm(mag)

    labels = np.array([c.label for c in spec.clips])
    feats = np.array([feature(i) for i in range(len(spec.clips))])
    centroids = np.array([feats[[i for i in split.train if labels[i] == k]].mean(axis=0) for k in range(10)])
    pred = np.argmax(feats[split.test] @ centroids.T, axis=1)
    assert np.mean(pred == labels[split.test]) > 0.9


def test_load_dataset_unknown():
    with pytest.raises(DatasetError):
        load_dataset("timit", "/nowhere")
