#include "mdnik/vision.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mdnik/errors.hpp"

namespace mdnik {

// ---------------------------------------------------------------------------
// PNM

Image parse_pnm(const std::string& bytes) {
    std::size_t pos = 0;
    auto skip_space_and_comments = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&](const char* what) {
        skip_space_and_comments();
        std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos || pos - start > 9) throw ParseError(std::string("PNM: bad ") + what);
        return std::stoi(bytes.substr(start, pos - start));
    };

    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw ParseError("PNM: only binary P5/P6 images are supported");
    const int channels = bytes[1] == '5' ? 1 : 3;
    pos = 2;
    const int width = read_int("width");
    const int height = read_int("height");
    const int maxval = read_int("maxval");
    if (width <= 0 || height <= 0) throw ParseError("PNM: empty image");
    if (maxval <= 0 || maxval > 255) throw ParseError("PNM: maxval must be in 1..255");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw ParseError("PNM: missing separator before pixel data");
    ++pos;
    Image img(width, height, channels);
    if (bytes.size() - pos < img.data.size()) throw ParseError("PNM: truncated pixel data");
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const auto v = static_cast<unsigned char>(bytes[pos + i]);
        if (v > maxval) throw ParseError("PNM: sample exceeds maxval");
        img.data[i] = maxval == 255 ? v : static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
    }
    return img;
}

Image read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open image '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_pnm(ss.str());
}

std::string encode_pnm(const Image& image) {
    if (image.channels != 1 && image.channels != 3) throw ValidationError("PNM: 1 or 3 channels required");
    std::string out = (image.channels == 1 ? "P5\n" : "P6\n") + std::to_string(image.width) + " " +
                      std::to_string(image.height) + "\n255\n";
    out.append(image.data.begin(), image.data.end());
    return out;
}

void write_pnm(const std::string& path, const Image& image) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write image '" + path + "'");
    out << encode_pnm(image);
}

// ---------------------------------------------------------------------------
// Masks and segmentation

std::size_t SegMask::popcount() const {
    std::size_t n = 0;
    for (auto v : data) n += v;
    return n;
}

std::vector<std::uint8_t> luma(const Image& image) {
    if (image.empty()) throw DomainError("empty image");
    if (image.channels == 1) return image.data;
    if (image.channels != 3) throw ValidationError("unsupported channel count");
    const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
    std::vector<std::uint8_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double y = 0.299 * image.data[3 * i] + 0.587 * image.data[3 * i + 1] + 0.114 * image.data[3 * i + 2];
        out[i] = static_cast<std::uint8_t>(std::min(255.0, std::floor(y + 0.5)));
    }
    return out;
}

SegMask mask_from_image(const Image& image) {
    const auto gray = luma(image);
    SegMask m(image.width, image.height);
    for (std::size_t i = 0; i < gray.size(); ++i) m.data[i] = gray[i] != 0;
    return m;
}

Image mask_to_image(const SegMask& mask) {
    Image img(mask.width, mask.height, 1);
    for (std::size_t i = 0; i < mask.data.size(); ++i) img.data[i] = mask.data[i] ? 255 : 0;
    return img;
}

int otsu_threshold(const std::vector<std::uint8_t>& gray) {
    if (gray.empty()) throw DomainError("empty image");
    std::array<double, 256> hist{};
    for (auto v : gray) hist[v] += 1.0;
    const double total = static_cast<double>(gray.size());
    double sum_all = 0.0;
    for (int i = 0; i < 256; ++i) sum_all += i * hist[i];

    // Foreground is [t, 255]; background [0, t).
    double best = -1.0;
    int first = 0, last = 0;
    double w0 = 0.0, sum0 = 0.0;
    for (int t = 1; t < 256; ++t) {
        w0 += hist[t - 1];
        sum0 += (t - 1) * hist[t - 1];
        const double w1 = total - w0;
        double var = 0.0;
        if (w0 > 0.0 && w1 > 0.0) {
            const double diff = sum0 / w0 - (sum_all - sum0) / w1;
            var = w0 * w1 * diff * diff;
        }
        const double tol = 1e-12 * std::max(1.0, best);
        if (var > best + tol) {
            best = var;
            first = last = t;
        } else if (std::abs(var - best) <= tol && last == t - 1) {
            last = t;
        }
    }
    return (first + last) / 2;
}

SegMask segment_threshold(const Image& image, const ThresholdSettings& settings) {
    if (image.empty()) throw DomainError("empty image");
    const auto gray = luma(image);
    const int t = settings.threshold ? *settings.threshold : otsu_threshold(gray);
    SegMask m(image.width, image.height);
    const bool bright = settings.polarity == Polarity::bright;
    for (std::size_t i = 0; i < gray.size(); ++i) m.data[i] = bright ? gray[i] >= t : gray[i] < t;
    return m;
}

SegMask ExternalMaskSegmenter::segment(const Image& image) const {
    if (image.width != mask_.width || image.height != mask_.height)
        throw DimensionError("external mask size does not match the image");
    return mask_;
}

// ---------------------------------------------------------------------------
// Connected components

std::vector<Blob> find_blobs(const SegMask& mask, std::size_t min_area) {
    std::vector<Blob> blobs;
    std::vector<std::uint8_t> seen(mask.data.size(), 0);
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            const std::size_t idx = static_cast<std::size_t>(y) * mask.width + x;
            if (!mask.data[idx] || seen[idx]) continue;
            Blob b;
            b.box = {x, y, x, y};
            double su = 0.0, sv = 0.0;
            seen[idx] = 1;
            stack.assign(1, {x, y});
            while (!stack.empty()) {
                const auto [px, py] = stack.back();
                stack.pop_back();
                ++b.pixel_count;
                su += px;
                sv += py;
                b.box.x0 = std::min(b.box.x0, px);
                b.box.y0 = std::min(b.box.y0, py);
                b.box.x1 = std::max(b.box.x1, px);
                b.box.y1 = std::max(b.box.y1, py);
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nx = px + dx, ny = py + dy;
                        if (nx < 0 || ny < 0 || nx >= mask.width || ny >= mask.height) continue;
                        const std::size_t n = static_cast<std::size_t>(ny) * mask.width + nx;
                        if (mask.data[n] && !seen[n]) {
                            seen[n] = 1;
                            stack.emplace_back(nx, ny);
                        }
                    }
                }
            }
            if (b.pixel_count < min_area) continue;
            b.centroid = {su / static_cast<double>(b.pixel_count), sv / static_cast<double>(b.pixel_count)};
            blobs.push_back(b);
        }
    }
    std::stable_sort(blobs.begin(), blobs.end(), [](const Blob& a, const Blob& b) {
        if (a.pixel_count != b.pixel_count) return a.pixel_count > b.pixel_count;
        if (a.box.y0 != b.box.y0) return a.box.y0 < b.box.y0;
        return a.box.x0 < b.box.x0;
    });
    return blobs;
}

// ---------------------------------------------------------------------------
// Metrics

MetricReport metrics(const SegMask& pred, const SegMask& truth) {
    if (pred.width != truth.width || pred.height != truth.height || pred.data.size() != truth.data.size())
        throw DimensionError("mask sizes differ: " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                             " vs " + std::to_string(truth.width) + "x" + std::to_string(truth.height));
    const auto n = static_cast<long long>(pred.data.size());
    long long inter = 0, p = 0, t = 0, match = 0;
    const auto* a = pred.data.data();
    const auto* b = truth.data.data();
#pragma omp parallel for reduction(+ : inter, p, t, match) schedule(static)
    for (long long i = 0; i < n; ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        inter += x && y;
        p += x;
        t += y;
        match += x == y;
    }
    MetricReport r;
    r.intersection = static_cast<std::size_t>(inter);
    r.pred_count = static_cast<std::size_t>(p);
    r.truth_count = static_cast<std::size_t>(t);
    r.union_count = r.pred_count + r.truth_count - r.intersection;
    r.matching = static_cast<std::size_t>(match);
    r.total = static_cast<std::size_t>(n);
    if (r.union_count == 0) {
        r.iou = 1.0;
        r.dice = 1.0;
    } else {
        r.iou = static_cast<double>(r.intersection) / static_cast<double>(r.union_count);
        r.dice = 2.0 * static_cast<double>(r.intersection) / static_cast<double>(r.pred_count + r.truth_count);
    }
    r.pixel_accuracy = r.total == 0 ? 1.0 : static_cast<double>(r.matching) / static_cast<double>(r.total);
    return r;
}

// ---------------------------------------------------------------------------
// Camera

void CameraModel::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ValidationError("camera focal lengths must be positive");
    if (!std::isfinite(cx) || !std::isfinite(cy)) throw ValidationError("camera principal point must be finite");
}

Eigen::Vector3d pixel_to_world(const CameraModel& camera, const Eigen::Vector2d& pixel, double plane_z) {
    camera.validate();
    if (!pixel.allFinite() || !std::isfinite(plane_z)) throw DomainError("non-finite pixel or plane height");
    const Eigen::Vector3d ray_cam((pixel.x() - camera.cx) / camera.fx, (pixel.y() - camera.cy) / camera.fy, 1.0);
    const Eigen::Vector3d ray = camera.pose.rotation * ray_cam;
    const Eigen::Vector3d& origin = camera.pose.translation;
    if (std::abs(ray.z()) <= 1e-12 * ray.norm()) throw GeometryError("viewing ray is parallel to the target plane");
    const double s = (plane_z - origin.z()) / ray.z();
    if (!(s > 0.0)) throw GeometryError("target plane intersection is behind the camera");
    return origin + s * ray;
}

Eigen::Vector2d world_to_pixel(const CameraModel& camera, const Eigen::Vector3d& point) {
    camera.validate();
    const Eigen::Vector3d pc = camera.pose.inverse().apply(point);
    if (!(pc.z() > 0.0)) throw GeometryError("point is behind the camera");
    return {camera.fx * pc.x() / pc.z() + camera.cx, camera.fy * pc.y() / pc.z() + camera.cy};
}

Image overlay_centroids(const Image& image, const std::vector<Blob>& blobs, int radius) {
    Image out(image.width, image.height, 3);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = image.at(x, y, image.channels == 3 ? c : 0);
    const double r2_in = (radius - 0.5) * (radius - 0.5);
    const double r2_out = (radius + 0.5) * (radius + 0.5);
    for (const Blob& b : blobs) {
        const int x0 = static_cast<int>(std::floor(b.centroid.x())) - radius - 1;
        const int y0 = static_cast<int>(std::floor(b.centroid.y())) - radius - 1;
        for (int y = y0; y <= y0 + 2 * radius + 3; ++y) {
            for (int x = x0; x <= x0 + 2 * radius + 3; ++x) {
                if (x < 0 || y < 0 || x >= out.width || y >= out.height) continue;
                const double dx = x - b.centroid.x(), dy = y - b.centroid.y();
                const double d2 = dx * dx + dy * dy;
                if (d2 >= r2_in && d2 <= r2_out) {
                    out.at(x, y, 0) = 0;
                    out.at(x, y, 1) = 255;
                    out.at(x, y, 2) = 0;
                }
            }
        }
    }
    return out;
}

}  // namespace mdnik
