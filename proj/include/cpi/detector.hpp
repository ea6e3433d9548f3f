#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpi/geometry.hpp"
#include "cpi/image.hpp"

namespace cpi {

/// One ROI as drawn on a canvas, with enough provenance for detectors that
/// know the scene (the synthetic oracle) to resolve what was drawn.
struct PlacedRoi {
  Placement placement;
  int frame_index = 0;
  Box roi_box;
};

struct CanvasView {
  int side = 0;
  const GrayImage* image = nullptr;  // null when the detector does not read pixels
  std::span<const PlacedRoi> placements;
};

struct DetectorCapabilities {
  int min_side = 1;
  int max_side = 1 << 16;
  std::vector<int> classes{0};
  bool needs_pixels = true;
};

class DetectorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Object detector run once per canvas. Returned boxes are in canvas coordinates.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual DetectorCapabilities capabilities() const = 0;
  virtual std::vector<Detection> detect(const CanvasView& canvas) = 0;
};

/// Runs an external program per canvas: the canvas is written as PGM to a
/// temporary file whose path is appended to `command`, and the program prints
/// detections as CSV lines `x,y,w,h,class,conf` on stdout.
class ExternalDetector final : public Detector {
 public:
  ExternalDetector(std::string command, std::filesystem::path scratch_dir);

  DetectorCapabilities capabilities() const override;
  std::vector<Detection> detect(const CanvasView& canvas) override;

 private:
  std::string command_;
  std::filesystem::path scratch_dir_;
  long calls_ = 0;
};

std::vector<Detection> parse_detection_csv(const std::string& text);

}  // namespace cpi
