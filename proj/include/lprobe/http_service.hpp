#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "lprobe/labeling.hpp"

namespace lprobe {

struct ServedImage {
  std::string image_id;
  std::string label_name;
  std::filesystem::path unperturbed;
  std::filesystem::path perturbed;
};

/// Reads the manifest written by `render`. Image paths are resolved against
/// the manifest's directory.
std::vector<ServedImage> load_manifest(const std::filesystem::path& path);

std::vector<LabelItem> label_items(const std::vector<ServedImage>& images);

/// HTTP front end over a LabelingStore.
///
///   GET  /api/task?judge=ID          -> task object or null
///   POST /api/vote                   -> {"sequence", "duplicate"}
///   GET  /api/dispositions           -> array of completed dispositions
///   GET  /images/<n>/unperturbed.png
///   GET  /images/<n>/perturbed.png
class LabelingServer {
 public:
  /// With `open_enrollment`, unknown judge IDs are registered on first contact
  /// instead of being rejected.
  LabelingServer(LabelingStore& store, std::vector<ServedImage> images, bool open_enrollment = false);
  ~LabelingServer();

  LabelingServer(const LabelingServer&) = delete;
  LabelingServer& operator=(const LabelingServer&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port.
  /// Returns the bound port.
  int start(const std::string& host, int port);
  /// Blocks in the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
};

}  // namespace lprobe
