import init, { Demo } from "./pkg/sketchcolor_demo.js";

const SIZE = 64;
const $ = (id) => document.getElementById(id);
let demo;

function draw(id, rgba) {
  const canvas = $(id);
  canvas.width = SIZE;
  canvas.height = SIZE;
  const img = new ImageData(new Uint8ClampedArray(rgba), SIZE, SIZE);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function generate() {
  if (demo) demo.free();
  demo = new Demo(BigInt($("seed").value), SIZE);
  draw("color", demo.color());
  draw("sketch", demo.sketch());
  draw("mask", demo.mask());
  warp();
  gate();
}

function warp() {
  const strength = Number($("strength").value);
  $("strength-value").textContent = strength.toFixed(1);
  draw("warped", demo.warp(4, strength, BigInt($("seed").value)));
  $("psnr").textContent = demo.warp_psnr().toFixed(2);
  $("msssim").textContent = demo.warp_ms_ssim().toFixed(4);
}

function gate() {
  const level = Number($("level").value);
  const threshold = Number($("threshold").value);
  $("level-value").textContent = `${SIZE / 4 >> level} px`;
  $("threshold-value").textContent = threshold.toFixed(2);
  draw("gate", demo.gate(level, threshold));
}

await init();
$("generate").addEventListener("click", generate);
$("strength").addEventListener("input", warp);
$("level").addEventListener("input", gate);
$("threshold").addEventListener("input", gate);
generate();
