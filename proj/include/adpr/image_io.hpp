#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "adpr/dataset.hpp"

namespace adpr {

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ManifestRow {
  std::size_t line = 0;
  std::string path;
  std::string identity;
  std::vector<std::uint8_t> attributes;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_index(const std::string& s, std::size_t& out) {
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

}  // namespace detail

/// relative_path,identity_label,attr_1,...,attr_k per line. Blank lines and
/// lines starting with '#' are skipped. Every row must carry exactly `k` bits.
inline std::vector<ManifestRow> parse_manifest(std::istream& in, std::size_t k, const std::string& source = "manifest") {
  std::vector<ManifestRow> rows;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(t);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(detail::trim(f));
    if (t.back() == ',') fields.emplace_back();
    auto fail = [&](const std::string& why) {
      throw ManifestError(source + ":" + std::to_string(no) + ": " + why);
    };
    if (fields.size() < 2) fail("expected relative_path,identity_label,attr_1..attr_k");
    if (fields[0].empty()) fail("empty image path");
    if (fields[1].empty()) fail("empty identity label");
    if (fields.size() - 2 != k) {
      fail("row has " + std::to_string(fields.size() - 2) + " attribute bits, configuration expects k=" + std::to_string(k));
    }
    ManifestRow row{no, fields[0], fields[1], {}};
    for (std::size_t a = 2; a < fields.size(); ++a) {
      if (fields[a] != "0" && fields[a] != "1") fail("attribute " + std::to_string(a - 1) + " is '" + fields[a] + "', expected 0 or 1");
      row.attributes.push_back(fields[a] == "1" ? 1 : 0);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ManifestError(source + ": manifest lists no samples");
  return rows;
}

/// Decodes an image file to RGB [3,h,w] in [0,1], resized with area interpolation.
inline Tensor<float> load_image(const std::filesystem::path& path, std::size_t h, std::size_t w) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot decode image " + path.string());
  cv::Mat rgb, sized, f;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  if (static_cast<std::size_t>(rgb.rows) != h || static_cast<std::size_t>(rgb.cols) != w) {
    cv::resize(rgb, sized, cv::Size(static_cast<int>(w), static_cast<int>(h)), 0, 0, cv::INTER_AREA);
  } else {
    sized = rgb;
  }
  sized.convertTo(f, CV_32FC3, 1.0 / 255.0);
  Tensor<float> out({3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    const auto* row = f.ptr<cv::Vec3f>(static_cast<int>(y));
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out[(c * h + y) * w + x] = std::clamp(row[x][static_cast<int>(c)], 0.0f, 1.0f);
    }
  }
  return out;
}

/// Loads the images a manifest lists (paths relative to `root`). Identity labels
/// are re-indexed densely: numerically when every label is an integer, otherwise
/// lexicographically.
inline LabeledDataset load_image_directory(const std::filesystem::path& root, const std::filesystem::path& manifest,
                                           std::size_t h, std::size_t w, std::size_t k) {
  std::ifstream f(manifest);
  if (!f) throw ManifestError("cannot open manifest " + manifest.string());
  const auto rows = parse_manifest(f, k, manifest.string());

  bool numeric = true;
  for (const auto& r : rows) {
    std::size_t v;
    numeric = numeric && detail::parse_index(r.identity, v);
  }
  std::vector<std::string> labels;
  for (const auto& r : rows) labels.push_back(r.identity);
  std::sort(labels.begin(), labels.end(), [&](const std::string& a, const std::string& b) {
    if (!numeric) return a < b;
    std::size_t x = 0, y = 0;
    detail::parse_index(a, x);
    detail::parse_index(b, y);
    return x < y;
  });
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  std::map<std::string, std::size_t> index;
  LabeledDataset ds;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    index[labels[i]] = i;
    std::size_t src = i;
    if (numeric) detail::parse_index(labels[i], src);
    ds.source_identity.push_back(src);
  }
  ds.classes = labels.size();
  ds.attributes = k;
  ds.provenance = "manifest:" + manifest.string();
  for (const auto& r : rows) {
    const std::filesystem::path p = root / r.path;
    if (!std::filesystem::exists(p)) {
      throw ManifestError(manifest.string() + ":" + std::to_string(r.line) + ": missing file " + p.string());
    }
    Sample s;
    try {
      s.image = load_image(p, h, w);
    } catch (const std::exception& e) {
      throw ManifestError(manifest.string() + ":" + std::to_string(r.line) + ": " + e.what());
    }
    s.identity = index.at(r.identity);
    s.attributes = r.attributes;
    ds.samples.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

/// Writes every sample as an 8-bit PNG plus a manifest.csv listing them.
/// Returns the manifest path.
inline std::filesystem::path write_image_directory(const LabeledDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  const std::filesystem::path manifest = dir / "manifest.csv";
  std::ofstream m(manifest, std::ios::binary);
  if (!m) throw std::runtime_error("cannot write " + manifest.string());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    const std::size_t h = s.image.dim(1), w = s.image.dim(2);
    cv::Mat bgr(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
    for (std::size_t y = 0; y < h; ++y) {
      auto* row = bgr.ptr<cv::Vec3b>(static_cast<int>(y));
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          const float v = s.image[(c * h + y) * w + x];
          row[x][static_cast<int>(2 - c)] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        }
      }
    }
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".png";
    if (!cv::imwrite((dir / name.str()).string(), bgr)) throw std::runtime_error("cannot write " + name.str());
    m << name.str() << ',' << ds.source_identity.at(s.identity);
    for (auto a : s.attributes) m << ',' << static_cast<int>(a);
    m << '\n';
  }
  if (!m) throw std::runtime_error("write failed: " + manifest.string());
  return manifest;
}

}  // namespace adpr
