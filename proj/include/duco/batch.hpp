#pragma once

// Flattened views of a group of stories, laid out story-major then frame.

#include <cstdint>
#include <vector>

#include "duco/data.hpp"
#include "duco/tensor.hpp"

namespace duco {

struct CaptionBatch {
  std::size_t stories = 0;
  std::size_t frames = 0;
  std::size_t max_len = 0;
  std::vector<std::int64_t> ids;    // [B*T*L]
  std::vector<std::uint8_t> mask;   // [B*T*L]
  std::vector<std::size_t> lengths; // [B*T]

  std::size_t rows() const { return stories * frames; }
  // Row-major [B, L] slices for frame k.
  std::vector<std::int64_t> frame_ids(std::size_t k) const;
  std::vector<std::uint8_t> frame_mask(std::size_t k) const;
};

CaptionBatch make_caption_batch(const std::vector<const data::Story*>& stories);
// [B, T, 3, H, W]
Tensor make_image_batch(const std::vector<const data::Story*>& stories);
// [B*T*C] 0/1 targets
std::vector<double> make_label_batch(const std::vector<const data::Story*>& stories);

std::vector<const data::Story*> pick(const data::StoryDataset& ds, const std::vector<std::size_t>& indices);

// Images of a [N, 3, H, W] tensor (or any tensor whose trailing dims are 3, H, W).
std::vector<data::Image> to_images(const Tensor& t);

}  // namespace duco
