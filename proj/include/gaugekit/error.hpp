#pragma once

#include <stdexcept>
#include <string>

namespace gauge {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not line up (matmul, transforms, checkpoint schema).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Pivot fell below the relative singularity threshold.
class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

// Container bytes or JSON documents that cannot be parsed.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A required tensor is absent from a checkpoint.
class MissingTensorError : public Error {
 public:
  using Error::Error;
};

class UnsupportedDtypeError : public Error {
 public:
  using Error::Error;
};

// Adapter factors disagree on rank, or an adapter names an unknown site.
class AdapterError : public Error {
 public:
  using Error::Error;
};

// Two specs / views / adapters built for different model configs.
class ConfigMismatchError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace gauge

namespace gauge {

// The requested transform is not valid for this architecture (e.g. a Q/K
// gauge on a model with learned per-coordinate QK scaling).
class UnsupportedArchitectureError : public Error {
 public:
  using Error::Error;
};

// An operation needs a gauge site the gauge spec does not enable.
class SiteNotEnabledError : public Error {
 public:
  using Error::Error;
};

}  // namespace gauge

namespace gauge {

// A subspace basis whose elements are linearly dependent.
class RankDeficientError : public Error {
 public:
  using Error::Error;
};

// No sampled safe component made the shifted base weight invertible.
class EvasionFailedError : public Error {
 public:
  using Error::Error;
};

}  // namespace gauge
