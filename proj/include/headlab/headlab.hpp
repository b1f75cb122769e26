#pragma once

#include "headlab/error.hpp"
#include "headlab/tensor.hpp"
#include "headlab/rng.hpp"
#include "headlab/attention.hpp"
#include "headlab/dit.hpp"
#include "headlab/train.hpp"
#include "headlab/synth.hpp"
#include "headlab/objectives.hpp"
#include "headlab/sampler.hpp"
#include "headlab/parallel.hpp"
#include "headlab/headhunter.hpp"
#include "headlab/sweep.hpp"
#include "headlab/io.hpp"
