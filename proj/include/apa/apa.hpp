// Convenience umbrella: pulls in the whole library.
#pragma once

#include <apa/numerics.hpp>
#include <apa/dataset.hpp>
#include <apa/adapter.hpp>
#include <apa/model.hpp>
#include <apa/training.hpp>
#include <apa/partition.hpp>
#include <apa/weighting.hpp>
#include <apa/unlearning.hpp>
#include <apa/serving.hpp>
#include <apa/experiment.hpp>
