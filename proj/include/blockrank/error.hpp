#pragma once

#include <stdexcept>
#include <string>

namespace blockrank {

// Base for everything this library throws. Subclasses tag the failure
// category so callers (and the CLI exit-code mapping) can dispatch on type.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes disagree with an operation's requirements.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An operation precondition was violated (non-scalar loss, step out of
// range, batch larger than queue capacity, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// A published operation produced NaN/Inf, or was fed a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Cosine similarity (or anything norm-based) met a zero-norm vector.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

// An attention row had every key masked out.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

// Position outside a precomputed cache, index outside a table.
class RangeError : public Error {
 public:
  using Error::Error;
};

// Sequence too long / too short for the model contract.
class LengthError : public Error {
 public:
  using Error::Error;
};

// Corrupt or mismatched serialized payloads (checkpoints, caches).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Malformed input while reading corpora or record files.
class IngestionError : public Error {
 public:
  using Error::Error;
};

// Invalid byte sequence in text input; carries the byte offset.
class EncodingError : public Error {
 public:
  EncodingError(const std::string& msg, size_t offset)
      : Error(msg + " at byte offset " + std::to_string(offset)), byte_offset(offset) {}
  size_t byte_offset;
};

// A referenced id has no entry (e.g. candidate without an embedding).
class LookupError : public Error {
 public:
  using Error::Error;
};

// Structured record violates its schema.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Line-oriented file failed to parse; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& msg, size_t line)
      : Error(msg + " (line " + std::to_string(line) + ")"), line_number(line) {}
  size_t line_number;
};

// A function handed to the gradient checker returned different values for
// identical inputs.
class DeterminismError : public Error {
 public:
  using Error::Error;
};

// Benchmark timing could not be resolved (all samples zero).
class MeasurementError : public Error {
 public:
  using Error::Error;
};

// A ranking metric was asked for on a query with no relevant documents.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Training diverged; carries the step and offending batch for diagnostics.
class TrainingAbort : public Error {
 public:
  using Error::Error;
};

// Configuration file / override problems; carries the offending key path.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg, std::string key = "")
      : Error(msg), key_path(std::move(key)) {}
  std::string key_path;
};

// Referenced input file does not exist or cannot be opened.
class MissingInputError : public Error {
 public:
  using Error::Error;
};

}  // namespace blockrank
