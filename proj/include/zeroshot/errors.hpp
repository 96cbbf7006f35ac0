#pragma once

#include <stdexcept>
#include <string>

namespace zeroshot {

/// Base class for every error thrown by this library.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes do not line up.
class dimension_error : public error {
 public:
  using error::error;
};

/// Invalid configuration value (bad hyperparameter, degenerate corpus, ...).
class config_error : public error {
 public:
  using error::error;
};

/// An API precondition was violated by the caller.
class contract_error : public error {
 public:
  using error::error;
};

/// Training aborted (non-finite loss or gradient).
class training_error : public error {
 public:
  using error::error;
};

/// A metric is undefined for the given inputs (e.g. single-class labels).
class metric_error : public error {
 public:
  using error::error;
};

/// File-level failures.
class io_error : public error {
 public:
  using error::error;
};

/// File does not start with the expected magic bytes.
class bad_magic_error : public io_error {
 public:
  using io_error::io_error;
};

/// File ends before the payload promised by its header.
class truncated_file_error : public io_error {
 public:
  using io_error::io_error;
};

/// A record references a class id outside the declared range.
class bad_label_error : public io_error {
 public:
  using io_error::io_error;
};

}  // namespace zeroshot
