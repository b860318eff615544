#pragma once

// 8-bit RGB raster plus the small set of image ops the pipeline needs.
// OpenCV is used strictly as the PNG codec; resampling, luminance and
// overlay rendering are implemented here so they are bit-deterministic.

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "neuropapyri/common.hpp"
#include "neuropapyri/tensor.hpp"

namespace npap {

struct Image {
    int h = 0, w = 0;
    std::vector<uint8_t> px;  // row-major, 3 channels (RGB)

    Image() = default;
    Image(int height, int width, uint8_t fill = 0)
        : h(height), w(width), px(static_cast<size_t>(height) * width * 3, fill) {}

    bool empty() const { return px.empty(); }

    uint8_t& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    uint8_t at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
};

inline Image load_image(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    if (m.empty()) throw IoError("cannot read image: " + path);
    Image img(m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < m.cols; ++x) {
            img.at(y, x, 0) = row[x][2];  // BGR -> RGB
            img.at(y, x, 1) = row[x][1];
            img.at(y, x, 2) = row[x][0];
        }
    }
    return img;
}

inline void save_png(const std::string& path, const Image& img) {
    if (img.empty()) throw IoError("save_png: empty image");
    cv::Mat m(img.h, img.w, CV_8UC3);
    for (int y = 0; y < img.h; ++y) {
        auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.w; ++x) {
            row[x][2] = img.at(y, x, 0);
            row[x][1] = img.at(y, x, 1);
            row[x][0] = img.at(y, x, 2);
        }
    }
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    if (!cv::imwrite(path, m)) throw IoError("cannot write image: " + path);
}

// Bilinear resample with half-pixel centers.
inline Image resize_bilinear(const Image& src, int oh, int ow) {
    if (src.empty() || oh < 1 || ow < 1) throw ShapeMismatchError("resize_bilinear: bad dims");
    Image dst(oh, ow);
    const double sy = static_cast<double>(src.h) / oh;
    const double sx = static_cast<double>(src.w) / ow;
    for (int y = 0; y < oh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(src.h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < ow; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(src.w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.w - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                                 wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
                dst.at(y, x, c) = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    return dst;
}

// BT.601 luma, rounded.
inline uint8_t luminance(uint8_t r, uint8_t g, uint8_t b) {
    return static_cast<uint8_t>(std::lround(0.299 * r + 0.587 * g + 0.114 * b));
}

inline Image to_greyscale(const Image& src) {
    Image dst = src;
    for (int y = 0; y < src.h; ++y)
        for (int x = 0; x < src.w; ++x) {
            const uint8_t v = luminance(src.at(y, x, 0), src.at(y, x, 1), src.at(y, x, 2));
            dst.at(y, x, 0) = dst.at(y, x, 1) = dst.at(y, x, 2) = v;
        }
    return dst;
}

// Per-channel median over all pixels; lines are mostly background, so this
// is the background color estimate used for padding.
inline std::array<uint8_t, 3> median_color(const Image& img) {
    std::array<uint8_t, 3> med{};
    std::vector<uint8_t> ch(static_cast<size_t>(img.h) * img.w);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) ch[static_cast<size_t>(y) * img.w + x] = img.at(y, x, c);
        auto mid = ch.begin() + ch.size() / 2;
        std::nth_element(ch.begin(), mid, ch.end());
        med[static_cast<size_t>(c)] = *mid;
    }
    return med;
}

// Aspect-preserving resize to target height, then right-pad with the median
// background color or center-crop to the target width.
inline Image standardize_line(const Image& src, int target_h, int target_w) {
    const int w1 = std::max(1, static_cast<int>(std::lround(static_cast<double>(src.w) * target_h / src.h)));
    Image scaled = resize_bilinear(src, target_h, w1);
    if (w1 == target_w) return scaled;
    if (w1 > target_w) {
        const int x0 = (w1 - target_w) / 2;
        Image out(target_h, target_w);
        for (int y = 0; y < target_h; ++y)
            for (int x = 0; x < target_w; ++x)
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = scaled.at(y, x0 + x, c);
        return out;
    }
    const auto bg = median_color(scaled);
    Image out(target_h, target_w);
    for (int y = 0; y < target_h; ++y)
        for (int x = 0; x < target_w; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = x < w1 ? scaled.at(y, x, c) : bg[static_cast<size_t>(c)];
    return out;
}

// Batch of images -> [B,3,H,W] float tensor in [0,1]. All images must share dims.
template <class T>
Tensor<T> to_float_batch(const std::vector<const Image*>& batch) {
    if (batch.empty()) throw ShapeMismatchError("to_float_batch: empty batch");
    const int h = batch[0]->h, w = batch[0]->w;
    Tensor<T> t({static_cast<int64_t>(batch.size()), 3, h, w});
    for (size_t i = 0; i < batch.size(); ++i) {
        const Image& img = *batch[i];
        if (img.h != h || img.w != w) throw ShapeMismatchError("to_float_batch: ragged batch");
        T* base = t.ptr() + static_cast<int64_t>(i) * 3 * h * w;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    base[(c * h + y) * w + x] = static_cast<T>(img.at(y, x, c)) / T(255);
    }
    return t;
}

// Upsamples a single-channel attention map to image resolution (values are
// resampled as floats, no quantization).
template <class T>
std::vector<float> upsample_map_bilinear(const Tensor<T>& map, int oh, int ow) {
    if (map.rank() != 2) throw ShapeMismatchError("upsample_map_bilinear: map must be 2-d");
    const int mh = static_cast<int>(map.shape[0]), mw = static_cast<int>(map.shape[1]);
    std::vector<float> out(static_cast<size_t>(oh) * ow);
    const double sy = static_cast<double>(mh) / oh, sx = static_cast<double>(mw) / ow;
    for (int y = 0; y < oh; ++y) {
        double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(mh - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, mh - 1);
        const double wy = fy - y0;
        for (int x = 0; x < ow; ++x) {
            double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(mw - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, mw - 1);
            const double wx = fx - x0;
            const double v =
                (1 - wy) * ((1 - wx) * map.at(y0, x0) + wx * map.at(y0, x1)) +
                wy * ((1 - wx) * map.at(y1, x0) + wx * map.at(y1, x1));
            out[static_cast<size_t>(y) * ow + x] = static_cast<float>(v);
        }
    }
    return out;
}

// Red-intensity heatmap alpha-blended (alpha 0.5) over the source image.
template <class T>
Image render_attention_overlay(const Image& src, const Tensor<T>& map) {
    const auto up = upsample_map_bilinear(map, src.h, src.w);
    Image out(src.h, src.w);
    for (int y = 0; y < src.h; ++y)
        for (int x = 0; x < src.w; ++x) {
            const float m = std::clamp(up[static_cast<size_t>(y) * src.w + x], 0.0f, 1.0f);
            const double red = 255.0 * m;
            out.at(y, x, 0) = static_cast<uint8_t>(std::lround(0.5 * src.at(y, x, 0) + 0.5 * red));
            out.at(y, x, 1) = static_cast<uint8_t>(std::lround(0.5 * src.at(y, x, 1)));
            out.at(y, x, 2) = static_cast<uint8_t>(std::lround(0.5 * src.at(y, x, 2)));
        }
    return out;
}

template <class T>
void export_attention_overlay(const Image& src, const Tensor<T>& map, const std::string& out_path) {
    save_png(out_path, render_attention_overlay(src, map));
}

}  // namespace npap
