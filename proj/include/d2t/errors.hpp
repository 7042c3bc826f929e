#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace d2t {

// Every recoverable failure in the library derives from Error so callers can
// catch the family at stage boundaries and still dispatch on the concrete type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NoSignalError : public Error {
 public:
  using Error::Error;
};

class DegenerateGeometryError : public Error {
 public:
  using Error::Error;
};

class DegenerateFitError : public Error {
 public:
  using Error::Error;
};

class NonPositiveDepthError : public Error {
 public:
  NonPositiveDepthError(const std::string& what, std::size_t offending_pixels)
      : Error(what), offending_pixels_(offending_pixels) {}
  std::size_t offending_pixels() const { return offending_pixels_; }

 private:
  std::size_t offending_pixels_;
};

class WarpDegenerateError : public Error {
 public:
  WarpDegenerateError(const std::string& what, std::size_t skipped, std::size_t total)
      : Error(what), skipped_(skipped), total_(total) {}
  std::size_t skipped() const { return skipped_; }
  std::size_t total() const { return total_; }

 private:
  std::size_t skipped_;
  std::size_t total_;
};

class OptimizationFailure : public Error {
 public:
  OptimizationFailure(const std::string& what, std::vector<double> trace)
      : Error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

class InpaintError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t byte_offset, const std::string& why)
      : Error(file + ": parse error at byte " + std::to_string(byte_offset) + ": " + why),
        file_(file),
        byte_offset_(byte_offset) {}
  const std::string& file() const { return file_; }
  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::string file_;
  std::size_t byte_offset_;
};

class ValidationError : public Error {
 public:
  ValidationError(const std::string& what, std::vector<std::string> offenders = {})
      : Error(what), offenders_(std::move(offenders)) {}
  const std::vector<std::string>& offenders() const { return offenders_; }

 private:
  std::vector<std::string> offenders_;
};

}  // namespace d2t
