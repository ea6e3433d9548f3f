#include "cpi/media_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

namespace cpi {

namespace fs = std::filesystem;

namespace {

class PnmHeaderReader {
 public:
  explicit PnmHeaderReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  void seek(std::size_t pos) { pos_ = pos; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const unsigned char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(c)) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  int read_uint(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1'000'000) fail(std::string("implausible ") + what, start);
      ++pos_;
    }
    if (pos_ == start) fail(std::string("expected ") + what, start);
    return static_cast<int>(value);
  }

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw MediaError("malformed PNM header at byte " + std::to_string(at) + ": " + msg);
  }

  void expect_single_whitespace() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("expected whitespace before raster", pos_);
    ++pos_;
  }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MediaError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double parse_double(const std::string& field, int line_no, const char* column) {
  const char* first = field.data();
  const char* last = field.data() + field.size();
  while (first < last && std::isspace(static_cast<unsigned char>(*first))) ++first;
  while (last > first && std::isspace(static_cast<unsigned char>(last[-1]))) --last;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || first == last || !std::isfinite(v)) {
    throw MediaError("line " + std::to_string(line_no) + ": non-numeric " + column + " field '" + field + "'");
  }
  return v;
}

int parse_int(const std::string& field, int line_no, const char* column) {
  const double v = parse_double(field, line_no, column);
  if (v != std::floor(v)) {
    throw MediaError("line " + std::to_string(line_no) + ": expected integer " + column + " '" + field + "'");
  }
  return static_cast<int>(v);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

GrayImage decode_pnm(std::span<const unsigned char> bytes) {
  PnmHeaderReader hdr(bytes);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    hdr.fail("expected magic P5 or P6", 0);
  }
  const bool rgb = bytes[1] == '6';
  hdr.seek(2);
  const int w = hdr.read_uint("width");
  const int h = hdr.read_uint("height");
  hdr.skip_space_and_comments();
  const std::size_t maxval_at = hdr.offset();
  const int maxval = hdr.read_uint("maxval");
  if (w <= 0 || h <= 0) hdr.fail("zero image dimension", 2);
  if (maxval != 255) hdr.fail("maxval must be 255", maxval_at);
  hdr.expect_single_whitespace();
  const std::size_t data_at = hdr.offset();
  const std::size_t channels = rgb ? 3 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * channels;
  if (bytes.size() - data_at < need) {
    throw MediaError("truncated PNM raster at byte " + std::to_string(bytes.size()) + ": expected " +
                     std::to_string(need) + " bytes from byte " + std::to_string(data_at));
  }
  GrayImage img(h, w);
  const unsigned char* p = bytes.data() + data_at;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (rgb) {
        img(r, c) = luma(p[0], p[1], p[2]);
        p += 3;
      } else {
        img(r, c) = *p++;
      }
    }
  }
  return img;
}

GrayImage read_pnm(const fs::path& path) {
  const auto bytes = slurp(path);
  try {
    return decode_pnm(bytes);
  } catch (const MediaError& e) {
    throw MediaError(path.string() + ": " + e.what());
  }
}

void write_pgm(const fs::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MediaError("cannot write " + path.string());
  out << "P5\n" << img.cols() << ' ' << img.rows() << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  if (!out) throw MediaError("write failed for " + path.string());
}

void write_ppm(const fs::path& path, const GrayImage& r, const GrayImage& g, const GrayImage& b) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MediaError("cannot write " + path.string());
  out << "P6\n" << r.cols() << ' ' << r.rows() << "\n255\n";
  for (Eigen::Index y = 0; y < r.rows(); ++y)
    for (Eigen::Index x = 0; x < r.cols(); ++x) {
      const char px[3] = {static_cast<char>(r(y, x)), static_cast<char>(g(y, x)), static_cast<char>(b(y, x))};
      out.write(px, 3);
    }
  if (!out) throw MediaError("write failed for " + path.string());
}

std::string frame_file_name(int index, bool rgb) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06d.%s", index, rgb ? "ppm" : "pgm");
  return buf;
}

FrameSequence::FrameSequence(const fs::path& dir, double source_fps) : fps_(source_fps) {
  if (!fs::is_directory(dir)) throw MediaError("not a directory: " + dir.string());
  if (!(source_fps > 0.0)) throw MediaError("source fps must be positive");
  static const std::regex pattern(R"(frame_(\d{6})\.(pgm|ppm))");
  std::map<int, fs::path> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (!entry.is_regular_file() || !std::regex_match(name, m, pattern)) continue;
    const int idx = std::stoi(m[1].str());
    if (!found.emplace(idx, entry.path()).second) {
      throw MediaError("duplicate frame index " + std::to_string(idx) + " in " + dir.string());
    }
  }
  int expected = found.empty() ? 0 : found.begin()->first;
  for (const auto& [idx, path] : found) {
    if (idx != expected) {
      throw MediaError("frame sequence gap in " + dir.string() + ": missing index " + std::to_string(expected) +
                       (idx - expected > 1 ? " through " + std::to_string(idx - 1) : std::string()));
    }
    files_.push_back({idx, path});
    ++expected;
  }
}

Frame FrameSequence::load(std::size_t position) const {
  const Entry& e = files_.at(position);
  Frame f;
  f.index = e.index;
  f.timestamp = e.index / fps_;
  f.pixels = read_pnm(e.path);
  return f;
}

Frame FrameSequence::next() {
  if (done()) throw MediaError("frame stream exhausted");
  return load(cursor_++);
}

std::vector<Frame> read_frame_sequence(const fs::path& dir, double source_fps) {
  FrameSequence seq(dir, source_fps);
  std::vector<Frame> frames;
  frames.reserve(seq.size());
  while (!seq.done()) frames.push_back(seq.next());
  return frames;
}

std::vector<GroundTruthRecord> parse_annotations(const std::string& text, int frame_width, int frame_height) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::vector<GroundTruthRecord> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kAnnotationHeader) {
        throw MediaError("line 1: expected header '" + std::string(kAnnotationHeader) + "'");
      }
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 8) {
      throw MediaError("line " + std::to_string(line_no) + ": expected 8 fields, got " + std::to_string(f.size()));
    }
    GroundTruthRecord r;
    r.frame_index = parse_int(f[0], line_no, "frame");
    r.track_id = parse_int(f[1], line_no, "track");
    r.box = {parse_double(f[2], line_no, "x"), parse_double(f[3], line_no, "y"), parse_double(f[4], line_no, "w"),
             parse_double(f[5], line_no, "h")};
    r.class_id = parse_int(f[6], line_no, "class");
    if (f[7].find_first_not_of(" \t") != std::string::npos) {
      r.detectability_area = parse_double(f[7], line_no, "detectability");
      if (*r.detectability_area <= 0.0) {
        throw MediaError("line " + std::to_string(line_no) + ": detectability must be positive");
      }
    }
    if (!r.box.valid()) throw MediaError("line " + std::to_string(line_no) + ": box width and height must be > 0");
    if (frame_width > 0 && frame_height > 0 &&
        (r.box.x < 0 || r.box.y < 0 || r.box.right() > frame_width || r.box.bottom() > frame_height)) {
      throw MediaError("line " + std::to_string(line_no) + ": box outside frame bounds");
    }
    out.push_back(r);
  }
  if (line_no == 0) throw MediaError("line 1: missing header");
  return out;
}

std::vector<GroundTruthRecord> read_annotations(const fs::path& path, int frame_width, int frame_height) {
  std::ifstream in(path);
  if (!in) throw MediaError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_annotations(ss.str(), frame_width, frame_height);
}

void write_annotations(const fs::path& path, std::span<const GroundTruthRecord> records) {
  std::ofstream out(path);
  if (!out) throw MediaError("cannot write " + path.string());
  out << kAnnotationHeader << '\n';
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.6f,%.6f,%.6f,%.6f,%d,", r.frame_index, r.track_id, r.box.x, r.box.y,
                  r.box.w, r.box.h, r.class_id);
    out << buf;
    if (r.detectability_area) {
      std::snprintf(buf, sizeof buf, "%.6f", *r.detectability_area);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw MediaError("write failed for " + path.string());
}

std::string results_line(const FrameDetections& fd) {
  nlohmann::json dets = nlohmann::json::array();
  for (const auto& d : fd.detections) {
    dets.push_back({{"x", d.box.x},
                    {"y", d.box.y},
                    {"w", d.box.w},
                    {"h", d.box.h},
                    {"class", d.class_id},
                    {"conf", d.confidence},
                    {"source", d.interpolated ? "interpolated" : "detector"}});
  }
  nlohmann::json j = {{"frame", fd.frame}, {"detections", dets}};
  return j.dump();
}

FrameDetections parse_results_line(const std::string& line) {
  FrameDetections fd;
  try {
    const auto j = nlohmann::json::parse(line);
    fd.frame = j.at("frame").get<int>();
    for (const auto& d : j.at("detections")) {
      Detection det;
      det.box = {d.at("x").get<double>(), d.at("y").get<double>(), d.at("w").get<double>(),
                 d.at("h").get<double>()};
      det.class_id = d.at("class").get<int>();
      det.confidence = d.at("conf").get<double>();
      const auto src = d.at("source").get<std::string>();
      if (src != "detector" && src != "interpolated") throw MediaError("unknown detection source '" + src + "'");
      det.interpolated = src == "interpolated";
      fd.detections.push_back(det);
    }
  } catch (const nlohmann::json::exception& e) {
    throw MediaError(std::string("malformed results line: ") + e.what());
  }
  return fd;
}

void write_results(const fs::path& path, std::span<const FrameDetections> frames) {
  std::ofstream out(path);
  if (!out) throw MediaError("cannot write " + path.string());
  for (const auto& fd : frames) out << results_line(fd) << '\n';
  if (!out) throw MediaError("write failed for " + path.string());
}

std::vector<FrameDetections> read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MediaError("cannot open " + path.string());
  std::vector<FrameDetections> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_results_line(line));
  }
  return out;
}

void write_canvas_dump(const fs::path& path, const GrayImage& canvas, std::span<const Placement> placements) {
  GrayImage img = canvas;
  const int w = width_of(img);
  const int h = height_of(img);
  for (const auto& p : placements) {
    const int x0 = std::clamp(p.pos_x, 0, w - 1);
    const int y0 = std::clamp(p.pos_y, 0, h - 1);
    const int x1 = std::clamp(p.pos_x + p.placed_w - 1, 0, w - 1);
    const int y1 = std::clamp(p.pos_y + p.placed_h - 1, 0, h - 1);
    for (int x = x0; x <= x1; ++x) img(y0, x) = img(y1, x) = 255;
    for (int y = y0; y <= y1; ++y) img(y, x0) = img(y, x1) = 255;
  }
  write_pgm(path, img);
}

}  // namespace cpi
