#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace amx {

// Caller broke a documented precondition (shape or count mismatch).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Input was well-formed but refers to something that does not exist or is out
// of range (unknown token, unknown probe target, bad threshold).
class Rejected : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string &what, int step) : std::runtime_error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

// Every restart of an optimization diverged.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string &what, std::vector<std::uint64_t> seeds)
      : std::runtime_error(what), seeds_(std::move(seeds)) {}
  const std::vector<std::uint64_t> &seeds() const { return seeds_; }

 private:
  std::vector<std::uint64_t> seeds_;
};

class BackendUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed configuration, annotation, report or wire data.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace amx
