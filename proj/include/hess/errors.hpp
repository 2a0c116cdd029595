#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>

namespace hess {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

// Degenerate point configuration for similarity estimation.
class RankError : public Error {
 public:
  using Error::Error;
};

class InfeasibleError : public Error {
 public:
  using Error::Error;
};

// A calibration or evaluation sample that has to be dropped, e.g. because the
// inlier set came out empty.
class SampleSkip : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class FingerprintMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Warnings go through a replaceable sink so tests can observe them.
class Log {
 public:
  using Sink = std::function<void(const std::string&)>;

  static void warn(const std::string& msg) {
    std::lock_guard lock(mutex());
    auto& s = sink();
    if (s) {
      s(msg);
    } else {
      std::cerr << "warning: " << msg << '\n';
    }
  }

  // Returns the previous sink.
  static Sink set_sink(Sink s) {
    std::lock_guard lock(mutex());
    std::swap(sink(), s);
    return s;
  }

 private:
  static Sink& sink() {
    static Sink s;
    return s;
  }
  static std::mutex& mutex() {
    static std::mutex m;
    return m;
  }
};

}  // namespace hess
