#pragma once

#include "quadfit/cam/camera.hpp"
#include "quadfit/core/errors.hpp"
#include "quadfit/core/image.hpp"

#include <vector>

namespace quadfit::data {

struct Keypoint2D {
  Vec2 uv = Vec2::Zero();  // continuous pixel coordinates
  bool visible = false;
};

/// One frame of input. Images are planar CHW in [0,1]; the embedding map is
/// meaningful only inside the mask. Camera extrinsics carry the per-frame
/// structure-from-motion pose (world -> camera), timestamp lives on the camera.
struct FrameObservation {
  Image rgb;        // 3 x H x W
  Image mask;       // 1 x H x W
  Image embedding;  // d_embed x H x W
  std::vector<Keypoint2D> keypoints;
  cam::Camera camera;
};

struct ObservationSet {
  std::vector<FrameObservation> frames;
  std::vector<uint8_t> is_test;  // one flag per frame

  int n_frames() const { return static_cast<int>(frames.size()); }
  int height() const { return frames.empty() ? 0 : frames[0].mask.height; }
  int width() const { return frames.empty() ? 0 : frames[0].mask.width; }
  int d_embed() const { return frames.empty() ? 0 : frames[0].embedding.channels; }

  std::vector<int> split_indices(bool test) const {
    std::vector<int> out;
    for (int t = 0; t < n_frames(); ++t)
      if ((is_test[static_cast<size_t>(t)] != 0) == test) out.push_back(t);
    return out;
  }
  std::vector<int> train_indices() const { return split_indices(false); }
  std::vector<int> test_indices() const { return split_indices(true); }

  void validate() const {
    if (frames.empty()) throw ConfigError("observations: no frames");
    if (is_test.size() != frames.size())
      throw DimensionMismatch("observations: split flag count");
    const int h = height(), w = width(), de = d_embed();
    const size_t n_kp = frames[0].keypoints.size();
    for (const auto& f : frames) {
      if (f.rgb.channels != 3 || f.mask.channels != 1)
        throw DimensionMismatch("observations: rgb must be 3-channel, mask 1-channel");
      if (f.rgb.height != h || f.rgb.width != w || f.mask.height != h || f.mask.width != w ||
          f.embedding.height != h || f.embedding.width != w)
        throw ResolutionMismatch("observations: frames differ in resolution");
      if (f.embedding.channels != de)
        throw DimensionMismatch("observations: embedding channel count varies");
      if (f.keypoints.size() != n_kp)
        throw DimensionMismatch("observations: keypoint count varies across frames");
      if (f.camera.height != h || f.camera.width != w)
        throw ResolutionMismatch("observations: camera size vs images");
      f.camera.require_valid();
    }
  }
};

/// Contiguous block split: with blocks (a, b) frame i is a test frame iff
/// (i mod (a+b)) >= a.
inline std::vector<uint8_t> make_block_split(int n_frames, int train_block, int test_block) {
  if (n_frames < 0) throw ConfigError("block split: negative frame count");
  if (train_block < 1 || test_block < 1)
    throw ConfigError("block split: block sizes must be >= 1");
  std::vector<uint8_t> flags(static_cast<size_t>(n_frames), 0);
  const int period = train_block + test_block;
  for (int i = 0; i < n_frames; ++i)
    flags[static_cast<size_t>(i)] = static_cast<uint8_t>((i % period) >= train_block);
  return flags;
}

}  // namespace quadfit::data
