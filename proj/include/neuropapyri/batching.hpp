#pragma once

// Batch assembly (standardization + optional greyscale augmentation) and
// whole-set inference helpers shared by the training loop and evaluation.

#include <vector>

#include "neuropapyri/data.hpp"
#include "neuropapyri/model.hpp"

namespace npap {

// Images are standardized to the model's input geometry on the fly; the
// augmentation stream is keyed by (epoch, sample index) so batch composition
// does not change per-sample randomness.
template <class T>
Tensor<T> make_batch(const std::vector<LineSample>& samples, const std::vector<size_t>& indices,
                     int input_h, int input_w, double augment_rate = 0.0,
                     const Rng* master = nullptr, int64_t epoch = 0) {
    std::vector<Image> owned;
    owned.reserve(indices.size());
    std::vector<const Image*> ptrs;
    ptrs.reserve(indices.size());
    for (size_t idx : indices) {
        const Image* img = &samples[idx].image;
        if (img->empty()) throw DataError("make_batch: sample has no image: " + samples[idx].id);
        if (img->h != input_h || img->w != input_w) {
            owned.push_back(standardize_line(*img, input_h, input_w));
            img = &owned.back();
        }
        if (augment_rate > 0.0 && master != nullptr) {
            Rng aug = master->child(mix64(0xA06D3ULL + static_cast<uint64_t>(epoch),
                                          static_cast<uint64_t>(idx)));
            Image a = augment_greyscale(*img, augment_rate, aug);
            owned.push_back(std::move(a));
            img = &owned.back();
        }
        ptrs.push_back(img);
    }
    return to_float_batch<T>(ptrs);
}

// Presence labels restricted to the assigned head letters, in head order.
template <class T>
Tensor<T> presence_labels(const std::vector<LineSample>& samples, const std::vector<size_t>& indices,
                          const std::vector<int>& head_letters) {
    Tensor<T> labels({static_cast<int64_t>(indices.size()), static_cast<int64_t>(head_letters.size())});
    for (size_t b = 0; b < indices.size(); ++b) {
        const auto pv = greek::presence_vector(samples[indices[b]].transcription);
        for (size_t i = 0; i < head_letters.size(); ++i)
            labels.at(static_cast<int64_t>(b), static_cast<int64_t>(i)) =
                static_cast<T>(pv[static_cast<size_t>(head_letters[i])]);
    }
    return labels;
}

// Presence logits for a whole sample set (eval mode, no autograd).
template <class T>
Tensor<T> collect_presence_logits(NeuroPapyri<T>& model, const std::vector<LineSample>& samples,
                                  int batch_size = 16) {
    if (model.config().variant != "full")
        throw ConfigError("presence logits require the full model variant");
    ag::NoGradGuard ng;
    const bool was_training = model.is_training();
    model.set_training(false);
    const int64_t n = static_cast<int64_t>(samples.size());
    const int64_t n_heads = model.config().n_heads;
    Tensor<T> logits({n, n_heads});
    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t end = std::min(n, start + batch_size);
        std::vector<size_t> idx;
        for (int64_t i = start; i < end; ++i) idx.push_back(static_cast<size_t>(i));
        auto x = Var<T>::constant(
            make_batch<T>(samples, idx, model.config().input_h, model.config().input_w));
        auto out = model.forward(x);
        for (int64_t b = 0; b < end - start; ++b)
            for (int64_t h = 0; h < n_heads; ++h)
                logits.at(start + b, h) = out.presence_logits.value().at(b, h);
    }
    model.set_training(was_training);
    return logits;
}

// Raw (un-normalized) embeddings for a whole sample set (eval mode).
template <class T>
std::vector<std::vector<T>> compute_embeddings(NeuroPapyri<T>& model,
                                               const std::vector<LineSample>& samples,
                                               int batch_size = 16) {
    ag::NoGradGuard ng;
    const bool was_training = model.is_training();
    model.set_training(false);
    std::vector<std::vector<T>> embs;
    embs.reserve(samples.size());
    const int64_t n = static_cast<int64_t>(samples.size());
    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t end = std::min(n, start + batch_size);
        std::vector<size_t> idx;
        for (int64_t i = start; i < end; ++i) idx.push_back(static_cast<size_t>(i));
        auto x = Var<T>::constant(
            make_batch<T>(samples, idx, model.config().input_h, model.config().input_w));
        auto out = model.forward(x);
        const int64_t d = out.embedding.value().shape[1];
        for (int64_t b = 0; b < end - start; ++b) {
            std::vector<T> e(static_cast<size_t>(d));
            for (int64_t j = 0; j < d; ++j) e[static_cast<size_t>(j)] = out.embedding.value().at(b, j);
            embs.push_back(std::move(e));
        }
    }
    model.set_training(was_training);
    return embs;
}

}  // namespace npap
