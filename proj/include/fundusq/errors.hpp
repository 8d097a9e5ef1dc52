#pragma once

#include <stdexcept>
#include <string>

namespace fundusq {

/// Base class for every error raised by the toolkit. `code()` is a stable
/// machine-readable identifier used by the CLI and the HTTP service.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define FUNDUSQ_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(#Name, what) {}   \
  }

// imaging
FUNDUSQ_DEFINE_ERROR(AllBlackImage);
FUNDUSQ_DEFINE_ERROR(DecodeError);
FUNDUSQ_DEFINE_ERROR(InvalidImage);

// datasets
FUNDUSQ_DEFINE_ERROR(ParseError);
FUNDUSQ_DEFINE_ERROR(InsufficientData);
FUNDUSQ_DEFINE_ERROR(IdCollision);

// qmodel
FUNDUSQ_DEFINE_ERROR(UnsupportedConfig);
FUNDUSQ_DEFINE_ERROR(WrongHead);
FUNDUSQ_DEFINE_ERROR(ShapeMismatch);
FUNDUSQ_DEFINE_ERROR(IoError);
FUNDUSQ_DEFINE_ERROR(CorruptCheckpoint);

// training
FUNDUSQ_DEFINE_ERROR(MissingLabels);
FUNDUSQ_DEFINE_ERROR(EmptySplit);
FUNDUSQ_DEFINE_ERROR(WrongStage);

// metrics
FUNDUSQ_DEFINE_ERROR(LengthMismatch);
FUNDUSQ_DEFINE_ERROR(EmptyInput);
FUNDUSQ_DEFINE_ERROR(AllZeroDifferences);
FUNDUSQ_DEFINE_ERROR(DegenerateInput);
FUNDUSQ_DEFINE_ERROR(IndexOutOfRange);
FUNDUSQ_DEFINE_ERROR(OneClassOnly);

// explain
FUNDUSQ_DEFINE_ERROR(UnknownLayer);
FUNDUSQ_DEFINE_ERROR(NonScalarOutput);
FUNDUSQ_DEFINE_ERROR(DimensionMismatch);

// cli / config
FUNDUSQ_DEFINE_ERROR(ConfigError);

#undef FUNDUSQ_DEFINE_ERROR

/// Validation failures carry the offending record id when one is known.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& what, std::string record_id = {})
      : Error("ValidationError",
              record_id.empty() ? what : what + " (record '" + record_id + "')"),
        record_id_(std::move(record_id)) {}

  const std::string& record_id() const noexcept { return record_id_; }

 private:
  std::string record_id_;
};

}  // namespace fundusq
