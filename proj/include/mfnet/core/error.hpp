#pragma once

#include <stdexcept>
#include <string>

namespace mfnet {

// Configuration problems: bad keys, inconsistent sizes, incompatible checkpoints.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unreadable files, malformed datasets, labels out of range.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// No valid episode could be drawn from the index.
class EpisodeError : public DataError {
 public:
  using DataError::DataError;
};

// Checkpoint version / manifest / head mismatch.
class CheckpointError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Non-finite loss during training.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::string episode_id)
      : std::runtime_error(what), episode_id_(std::move(episode_id)) {}
  const std::string& episode_id() const noexcept { return episode_id_; }

 private:
  std::string episode_id_;
};

// No class had a non-zero IoU denominator.
class UndefinedScoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mfnet
