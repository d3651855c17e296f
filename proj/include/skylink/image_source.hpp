#pragma once

#include "skylink/data_model.hpp"
#include "skylink/image.hpp"

#include <map>
#include <stdexcept>
#include <string>

namespace skylink {

// Resolves an ImageRecord to pixels.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual Image load(const ImageRecord& record) const = 0;
};

class FileImageSource final : public ImageSource {
 public:
  Image load(const ImageRecord& record) const override { return read_ppm(record.path); }
};

// In-memory images keyed by image_id; used by synthetic datasets and tests.
class MemoryImageSource final : public ImageSource {
 public:
  void put(const std::string& image_id, Image image) { images_[image_id] = std::move(image); }

  Image load(const ImageRecord& record) const override {
    auto it = images_.find(record.image_id);
    if (it == images_.end()) throw ImageError("no in-memory image for " + record.image_id);
    return it->second;
  }

  bool contains(const std::string& image_id) const { return images_.count(image_id) != 0; }
  std::size_t size() const { return images_.size(); }

 private:
  std::map<std::string, Image> images_;
};

}  // namespace skylink
