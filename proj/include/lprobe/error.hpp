#pragma once

#include <stdexcept>
#include <string>

namespace lprobe {

/// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or network geometry do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff graph (stale graph, non-scalar loss, ...).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Archive container is malformed, truncated or of the wrong version.
class ArchiveError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-provided configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Rejected labeling request (unknown judge, stage violation, ...).
class LabelingError : public Error {
 public:
  using Error::Error;
};

}  // namespace lprobe
