#include "duco/batch.hpp"

#include <stdexcept>

namespace duco {

std::vector<std::int64_t> CaptionBatch::frame_ids(std::size_t k) const {
  std::vector<std::int64_t> out;
  out.reserve(stories * max_len);
  for (std::size_t b = 0; b < stories; ++b) {
    const auto* row = ids.data() + (b * frames + k) * max_len;
    out.insert(out.end(), row, row + max_len);
  }
  return out;
}

std::vector<std::uint8_t> CaptionBatch::frame_mask(std::size_t k) const {
  std::vector<std::uint8_t> out;
  out.reserve(stories * max_len);
  for (std::size_t b = 0; b < stories; ++b) {
    const auto* row = mask.data() + (b * frames + k) * max_len;
    out.insert(out.end(), row, row + max_len);
  }
  return out;
}

CaptionBatch make_caption_batch(const std::vector<const data::Story*>& stories) {
  if (stories.empty()) throw std::invalid_argument("empty story batch");
  CaptionBatch cb;
  cb.stories = stories.size();
  cb.frames = stories.front()->length();
  cb.max_len = stories.front()->captions.front().ids.size();
  for (const auto* s : stories) {
    if (s->length() != cb.frames) throw std::invalid_argument("stories in a batch must share T");
    for (const auto& c : s->captions) {
      if (c.ids.size() != cb.max_len) throw std::invalid_argument("captions in a batch must share L");
      cb.ids.insert(cb.ids.end(), c.ids.begin(), c.ids.end());
      const auto m = c.mask();
      cb.mask.insert(cb.mask.end(), m.begin(), m.end());
      cb.lengths.push_back(c.length);
    }
  }
  return cb;
}

Tensor make_image_batch(const std::vector<const data::Story*>& stories) {
  if (stories.empty()) throw std::invalid_argument("empty story batch");
  const auto& first = stories.front()->frames.front();
  const std::size_t T = stories.front()->length(), H = first.height, W = first.width;
  std::vector<double> v;
  v.reserve(stories.size() * T * 3 * H * W);
  for (const auto* s : stories)
    for (const auto& im : s->frames) {
      if (im.height != H || im.width != W) throw std::invalid_argument("frames in a batch must share H and W");
      v.insert(v.end(), im.pixels.begin(), im.pixels.end());
    }
  return Tensor::from({stories.size(), T, 3, H, W}, std::move(v));
}

std::vector<double> make_label_batch(const std::vector<const data::Story*>& stories) {
  std::vector<double> out;
  for (const auto* s : stories)
    for (const auto& l : s->char_labels)
      for (auto b : l) out.push_back(b);
  return out;
}

std::vector<const data::Story*> pick(const data::StoryDataset& ds, const std::vector<std::size_t>& indices) {
  std::vector<const data::Story*> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(&ds.stories.at(i));
  return out;
}

std::vector<data::Image> to_images(const Tensor& t) {
  if (t.rank() < 3 || t.dim(-3) != 3) throw std::invalid_argument("to_images expects [..., 3, H, W]");
  const std::size_t H = t.dim(-2), W = t.dim(-1), per = 3 * H * W;
  std::vector<data::Image> out;
  const auto v = t.data();
  for (std::size_t off = 0; off < v.size(); off += per)
    out.push_back({H, W, std::vector<double>(v.begin() + off, v.begin() + off + per)});
  return out;
}

}  // namespace duco
