#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpi/geometry.hpp"
#include "cpi/image.hpp"

namespace cpi {

class MediaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Frame {
  int index = 0;
  double timestamp = 0.0;
  GrayImage pixels;

  int width() const { return width_of(pixels); }
  int height() const { return height_of(pixels); }
};

struct GroundTruthRecord {
  int frame_index = 0;
  int track_id = 0;
  Box box;
  int class_id = 0;
  std::optional<double> detectability_area;
};

// ---- PNM ----

/// Decode binary PGM (P5) or PPM (P6, converted to gray) with maxval 255.
GrayImage decode_pnm(std::span<const unsigned char> bytes);
GrayImage read_pnm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
void write_ppm(const std::filesystem::path& path, const Image<std::uint8_t>& r, const Image<std::uint8_t>& g,
               const Image<std::uint8_t>& b);

inline std::uint8_t luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return saturate_u8(0.299 * r + 0.587 * g + 0.114 * b);
}

std::string frame_file_name(int index, bool rgb = false);

/// Ordered, lazily decoded stream over `frame_%06d.pgm|ppm` files in a directory.
/// Gaps in the index sequence are rejected when the directory is opened.
class FrameSequence {
 public:
  FrameSequence(const std::filesystem::path& dir, double source_fps);

  std::size_t size() const { return files_.size(); }
  bool done() const { return cursor_ >= files_.size(); }
  Frame next();
  Frame load(std::size_t position) const;

 private:
  struct Entry {
    int index;
    std::filesystem::path path;
  };
  std::vector<Entry> files_;
  std::size_t cursor_ = 0;
  double fps_;
};

std::vector<Frame> read_frame_sequence(const std::filesystem::path& dir, double source_fps);

// ---- annotations ----

inline constexpr const char* kAnnotationHeader = "frame,track,x,y,w,h,class,detectability";

/// Parse the annotation CSV. When frame dimensions are given, boxes outside
/// the frame are rejected.
std::vector<GroundTruthRecord> read_annotations(const std::filesystem::path& path, int frame_width = 0,
                                                int frame_height = 0);
std::vector<GroundTruthRecord> parse_annotations(const std::string& text, int frame_width = 0,
                                                 int frame_height = 0);
void write_annotations(const std::filesystem::path& path, std::span<const GroundTruthRecord> records);

// ---- results ----

struct FrameDetections {
  int frame = 0;
  std::vector<Detection> detections;
};

std::string results_line(const FrameDetections& fd);
FrameDetections parse_results_line(const std::string& line);
void write_results(const std::filesystem::path& path, std::span<const FrameDetections> frames);
std::vector<FrameDetections> read_results(const std::filesystem::path& path);

/// Canvas debug dump: the canvas image with every placement outlined at 255.
void write_canvas_dump(const std::filesystem::path& path, const GrayImage& canvas,
                       std::span<const Placement> placements);

}  // namespace cpi
