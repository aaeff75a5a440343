#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mdnik/kinematics.hpp"

namespace mdnik {

// 8-bit image, interleaved, 1 (gray) or 3 (RGB) channels, row-major.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<std::uint8_t> data;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    bool empty() const { return width <= 0 || height <= 0; }
    std::uint8_t& at(int x, int y, int c = 0) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    std::uint8_t at(int x, int y, int c = 0) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

// Binary PGM (P5) and PPM (P6), maxval up to 255.
Image read_pnm(const std::string& path);
Image parse_pnm(const std::string& bytes);
std::string encode_pnm(const Image& image);
void write_pnm(const std::string& path, const Image& image);

struct SegMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;  // 0 or 1

    SegMask() = default;
    SegMask(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

    std::uint8_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
    std::size_t popcount() const;
};

// Any non-zero gray (or luma) value is foreground.
SegMask mask_from_image(const Image& image);
// 0 / 255 gray image.
Image mask_to_image(const SegMask& mask);

// 0.299 R + 0.587 G + 0.114 B, rounded; gray images pass through.
std::vector<std::uint8_t> luma(const Image& image);

enum class Polarity { bright, dark };

struct ThresholdSettings {
    std::optional<int> threshold;  // unset: Otsu
    Polarity polarity = Polarity::bright;
};

// Otsu over a 256-bin histogram. Returns t such that the foreground class is
// values >= t; when the between-class variance is maximal over a run of
// thresholds the middle of the run is returned.
int otsu_threshold(const std::vector<std::uint8_t>& gray);

// Bright polarity keeps values >= t, dark keeps values < t.
SegMask segment_threshold(const Image& image, const ThresholdSettings& settings);

struct BoundingBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive
};

struct Blob {
    std::size_t pixel_count = 0;
    Eigen::Vector2d centroid = Eigen::Vector2d::Zero();  // (u, v) = (column, row)
    BoundingBox box;
};

// 8-connected components with at least min_area pixels, largest first; equal
// sizes ordered by the top-left corner of their box (row, then column).
std::vector<Blob> find_blobs(const SegMask& mask, std::size_t min_area = 1);

struct MetricReport {
    double iou = 0.0;
    double dice = 0.0;
    double pixel_accuracy = 0.0;
    std::size_t intersection = 0;
    std::size_t union_count = 0;
    std::size_t pred_count = 0;
    std::size_t truth_count = 0;
    std::size_t matching = 0;
    std::size_t total = 0;
};

// IoU, Dice and pixel accuracy; two empty masks score 1.
MetricReport metrics(const SegMask& pred, const SegMask& truth);

// Pinhole camera without distortion. Camera frame: x right, y down, z along
// the optical axis. pose maps camera coordinates into the world frame.
struct CameraModel {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    RigidTransform pose;

    void validate() const;
};

// Intersects the ray through pixel (u, v) with the plane z = plane_z.
Eigen::Vector3d pixel_to_world(const CameraModel& camera, const Eigen::Vector2d& pixel, double plane_z);
Eigen::Vector2d world_to_pixel(const CameraModel& camera, const Eigen::Vector3d& point);

// Copy of the image (as RGB) with a green ring around every centroid.
Image overlay_centroids(const Image& image, const std::vector<Blob>& blobs, int radius = 5);

// Source of colony masks. The threshold segmenter is built in; an external
// model can hand its output over as a mask file.
class Segmenter {
  public:
    virtual ~Segmenter() = default;
    virtual SegMask segment(const Image& image) const = 0;
};

class ThresholdSegmenter : public Segmenter {
  public:
    explicit ThresholdSegmenter(ThresholdSettings settings) : settings_(settings) {}
    SegMask segment(const Image& image) const override { return segment_threshold(image, settings_); }

  private:
    ThresholdSettings settings_;
};

class ExternalMaskSegmenter : public Segmenter {
  public:
    explicit ExternalMaskSegmenter(SegMask mask) : mask_(std::move(mask)) {}
    SegMask segment(const Image& image) const override;

  private:
    SegMask mask_;
};

}  // namespace mdnik
