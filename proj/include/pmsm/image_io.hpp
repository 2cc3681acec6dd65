#pragma once

#include <cmath>
#include <optional>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "pmsm/image.hpp"

namespace pmsm::io {

/// Decodes any format OpenCV understands. Returns nullopt when the file is
/// missing or undecodable.
inline std::optional<Image> read_image(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    if (m.empty()) return std::nullopt;
    Image img(m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y) {
        const auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < m.cols; ++x) {
            // OpenCV stores BGR
            img.at(y, x, 0) = row[x][2] / 255.0f;
            img.at(y, x, 1) = row[x][1] / 255.0f;
            img.at(y, x, 2) = row[x][0] / 255.0f;
        }
    }
    return img;
}

inline unsigned char to_byte(float v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_png(const std::string& path, const Image& img) {
    cv::Mat m(img.height, img.width, CV_8UC3);
    for (int y = 0; y < img.height; ++y) {
        auto* row = m.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.width; ++x)
            row[x] = cv::Vec3b(to_byte(img.at(y, x, 2)), to_byte(img.at(y, x, 1)), to_byte(img.at(y, x, 0)));
    }
    if (!cv::imwrite(path, m)) throw Error("cannot write image " + path);
}

}  // namespace pmsm::io
